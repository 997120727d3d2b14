//! Per-pixel segmentation of synthetic shapes: each pixel of each head is an
//! episode, so survival fractions are reported over pixels.
//!
//! cargo run --release --example segmentation_masks -- [seed]

use spg::tasks::{baseline_finetune, TaskKind, TaskSpec};
use spg::trainer::{retrain, TrainConfig};

fn main() -> spg::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let spec = TaskSpec::shapes_preset(seed);
    let data = spec.generate_all()?;
    let arch = spec.reference_arch();

    let base = baseline_finetune(&spec, &data, &TrainConfig::baseline_for(TaskKind::Segmentation, seed), "")?;
    println!("baseline pixel accuracy {:.4}  mIoU {:.4}", base.test.accuracy, base.test.mean_iou.unwrap_or(0.0));

    let cfg = TrainConfig::hpo("shapes", arch.width(), arch.classes, seed)?;
    let out = retrain(&base.checkpoint, &data, &cfg, "")?;
    for r in out.metrics.records.iter().filter(|r| r.split == "train") {
        let s: Vec<String> = r.survival.iter().flatten().map(|v| format!("{v:.3}")).collect();
        println!("epoch {:2} {:<9} survival [{}]", r.epoch, format!("{:?}", r.phase), s.join(" "));
    }
    println!(
        "stripped pixel accuracy {:.4}  mIoU {:.4}  per class {:?}",
        out.stripped_test.accuracy,
        out.stripped_test.mean_iou.unwrap_or(0.0),
        out.stripped_test.class_iou
    );
    Ok(())
}
