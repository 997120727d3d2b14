//! Push a tensor of ones through a chain of dropout layers and compare the
//! surviving fraction at each depth with the closed-form cumulative rate.
//!
//! cargo run --release --example dropout_chain -- [rate] [depth]

use spg::autodiff::{dropout, Mode, RngStream, Tensor};
use spg::trp::{cumulative_rate, TrpConfig};

fn main() -> spg::Result<()> {
    let mut args = std::env::args().skip(1);
    let rate: f64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0.2);
    let depth: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(3);
    let n = 200_000;

    let cfg = TrpConfig::hpo(vec![rate; depth], 1, 2)?;
    let mut rng = RngStream::new(0, 1);
    let mut x = Tensor::new(vec![n], vec![1.0; n])?;
    println!("depth  kept      expected  cumulative rate");
    for t in 1..=depth {
        x = dropout(&x, rate, &mut rng, Mode::Train)?;
        let kept = x.data().iter().filter(|&&v| v != 0.0).count() as f64 / n as f64;
        let c = cumulative_rate(&cfg, t)?;
        println!("{t:>5}  {kept:.5}   {:.5}   {c}", 1.0 - c);
    }
    // evaluation mode is the identity
    let y = dropout(&x, rate, &mut rng, Mode::Eval)?;
    assert!(y.bit_eq(&x));
    Ok(())
}
