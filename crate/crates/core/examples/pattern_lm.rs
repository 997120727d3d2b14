//! Next-token prediction on a noisy periodic language. Every token is an
//! episode; accuracy on positions untouched by noise is reported separately.
//!
//! cargo run --release --example pattern_lm -- [seed]

use spg::tasks::{baseline_finetune, TaskKind, TaskSpec};
use spg::trainer::{retrain, TrainConfig};

fn main() -> spg::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let spec = TaskSpec::pattern_preset(seed);
    let data = spec.generate_all()?;
    let arch = spec.reference_arch();

    let base = baseline_finetune(&spec, &data, &TrainConfig::baseline_for(TaskKind::LanguageModeling, seed), "")?;
    let cfg = TrainConfig::hpo("pattern", arch.width(), arch.classes, seed)?;
    let out = retrain(&base.checkpoint, &data, &cfg, "")?;
    for (label, m) in [("baseline", &out.baseline_test), ("stripped", &out.stripped_test)] {
        println!(
            "{label}  accuracy {:.4}  clean-position accuracy {:.4}  loss {:.4}",
            m.accuracy,
            m.clean_accuracy.unwrap_or(f64::NAN),
            m.loss
        );
    }
    Ok(())
}
