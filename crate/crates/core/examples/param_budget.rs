//! Count the temporary parameters a replica chain adds and show that
//! stripping restores the deployed parameter count.
//!
//! cargo run --release --example param_budget

use spg::tasks::TaskSpec;
use spg::trp::{added_param_count, SpgModel, TrpConfig};

fn main() -> spg::Result<()> {
    for (label, cfg) in [
        ("dropout chain, D=768, T=3", TrpConfig::hpo(vec![0.2; 3], 768, 1000)?),
        ("depth chain, D=768, T=3, 2 blocks", TrpConfig::nas(3, 2, 768, 1000)?),
    ] {
        println!("{label:<36} {:>10} temporary", added_param_count(&cfg).temporary);
    }

    let spec = TaskSpec::shapes_preset(0);
    let arch = spec.reference_arch();
    let mut model = SpgModel::new(arch.clone(), 0)?;
    let base = model.store().scalar_count();
    model.attach(TrpConfig::hpo(vec![0.2; 3], arch.width(), arch.classes)?, 0)?;
    println!("\nsegmentation network with its auxiliary head");
    println!("  base       {base}");
    println!("  attached   {} ({:?})", model.store().scalar_count(), model.budget());
    println!("  stripped   {}", model.strip()?.store().scalar_count());
    Ok(())
}
