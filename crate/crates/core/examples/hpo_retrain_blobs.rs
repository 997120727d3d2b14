//! Train a blobs baseline, retrain it with a dropout chain, strip the chain
//! and compare held-out accuracy against the Bayes ceiling.
//!
//! cargo run --release --example hpo_retrain_blobs -- [seed]

use spg::tasks::{baseline_finetune, bayes_accuracy, TaskSpec};
use spg::trainer::{retrain, TrainConfig};

fn main() -> spg::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let spec = TaskSpec::blobs_preset(seed);
    let data = spec.generate_all()?;
    let arch = spec.reference_arch();

    let base = baseline_finetune(&spec, &data, &TrainConfig::baseline("blobs", seed), "")?;
    let cfg = TrainConfig::hpo("blobs", arch.width(), arch.classes, seed)?;
    let out = retrain(&base.checkpoint, &data, &cfg, "")?;

    println!("bayes ceiling      {:.4}", bayes_accuracy(&spec)?);
    println!("baseline test      {:.4}", out.baseline_test.accuracy);
    println!("stripped test      {:.4}", out.stripped_test.accuracy);
    for r in out.metrics.records.iter().filter(|r| r.split == "train") {
        let surv: Vec<String> = r.survival.iter().flatten().map(|s| format!("{s:.3}")).collect();
        println!("epoch {:2} {:?} lr {:.1e} loss {:.4} survival [{}]", r.epoch, r.phase, r.lr, r.loss, surv.join(", "));
    }
    Ok(())
}
