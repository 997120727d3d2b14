//! Print the observed-state transition table, then every correctness
//! pattern at a chosen depth with its state trace, rewards, masks and returns.
//!
//! cargo run --release --example trajectory_truth_table -- [T]

use spg::trajectory::{enumerate_nonzero_returns, step_observed, truth_table};

fn main() -> spg::Result<()> {
    let depth: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let table = truth_table(step_observed);
    let cases = ["(1,1)", "(1,0)", "(0,1)", "(0,0)", "(-1,1)", "(-1,0)"];
    println!("(o, correct) -> o'");
    for (c, o) in cases.iter().zip(table) {
        println!("  {c:<7} -> {o:>2}");
    }

    let e = enumerate_nonzero_returns(depth)?;
    println!("\nT = {depth}: pattern, trace, rewards, masks, weighted and plain return");
    for r in &e.records {
        println!(
            "  {:?} {:?} {:?} {:?} {:.2} {:.0}{}",
            r.pattern,
            r.o_trace,
            r.rewards,
            r.masks,
            r.return_weighted,
            r.return_unweighted,
            if r.resurrection { "  (climbs back from -1)" } else { "" }
        );
    }
    println!("mask/reward divergences: {:?}", e.divergences());
    Ok(())
}
