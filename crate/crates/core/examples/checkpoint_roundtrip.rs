//! Train a few steps with an attached chain, write a checkpoint, read it
//! back and resume. Resuming gives the same parameters as never stopping.
//!
//! cargo run --release --example checkpoint_roundtrip

use spg::tasks::{Split, TaskSpec};
use spg::trainer::{Checkpoint, TrainConfig, Trainer};
use spg::trp::SpgModel;

fn main() -> spg::Result<()> {
    let spec = TaskSpec::blobs_preset(1);
    let train = spec.generate(Split::Train)?;
    let arch = spec.reference_arch();
    let cfg = TrainConfig::hpo("blobs", arch.width(), arch.classes, 1)?;
    let fresh = || -> spg::Result<Trainer> {
        let mut m = SpgModel::new(arch.clone(), 1)?;
        m.attach(cfg.trp.clone().expect("chain"), 1)?;
        Trainer::new(m, cfg.clone())
    };

    let mut straight = fresh()?;
    straight.train_steps(&train, 30)?;

    let mut first = fresh()?;
    first.train_steps(&train, 12)?;
    let path = std::env::temp_dir().join("spg-example.ckpt");
    first.checkpoint("example").save(&path)?;
    let ckpt = Checkpoint::load(&path)?;
    println!("wrote {} ({} bytes)", path.display(), std::fs::metadata(&path).map_or(0, |m| m.len()));
    let mut resumed = Trainer::resume(&ckpt, cfg.clone())?;
    resumed.train_steps(&train, 18)?;

    println!("bytes stable on re-encode: {}", ckpt.to_bytes()? == Checkpoint::from_bytes(&ckpt.to_bytes()?)?.to_bytes()?);
    println!("resume matches uninterrupted: {}", resumed.model().store().bit_eq(straight.model().store()));
    let _ = std::fs::remove_file(&path);
    Ok(())
}
