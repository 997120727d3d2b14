//! Attach a chain of zero-initialised residual blocks to a trained blobs
//! network. Every depth scores the same as the base at attach time; after
//! retraining the chain is stripped and the base network evaluated.
//!
//! cargo run --release --example nas_depth_blobs -- [seed]

use spg::tasks::{baseline_finetune, TaskSpec};
use spg::trainer::{evaluate_depths, retrain, TrainConfig};

fn main() -> spg::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let spec = TaskSpec::blobs_preset(seed);
    let data = spec.generate_all()?;
    let arch = spec.reference_arch();

    let base = baseline_finetune(&spec, &data, &TrainConfig::baseline("blobs", seed), "")?;
    let cfg = TrainConfig::nas("blobs", arch.width(), arch.classes, seed)?;
    let out = retrain(&base.checkpoint, &data, &cfg, "")?;

    println!("val accuracy per depth at attach  {:?}", out.attach_depth_accuracy);
    println!("val accuracy per depth after      {:?}", evaluate_depths(&out.spg.model()?, &data.val)?);
    println!("baseline test {:.4}  stripped test {:.4}", out.baseline_test.accuracy, out.stripped_test.accuracy);
    println!("parameters: trained {}  deployed {}", out.spg.params.scalar_count(), out.stripped.params.scalar_count());
    Ok(())
}
