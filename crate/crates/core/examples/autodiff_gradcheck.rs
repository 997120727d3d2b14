//! Differentiate a two-layer softmax classifier on the tape and compare the
//! input-weight gradient against central differences, then run the built-in
//! check of every primitive.
//!
//! cargo run --release --example autodiff_gradcheck

use spg::autodiff::gradcheck::{central_difference, check_primitive, primitive_cases, relative_error};
use spg::autodiff::{RngStream, Tape, Tensor, Var};

const ROWS: usize = 5;
const IN: usize = 3;
const HIDDEN: usize = 4;
const CLASSES: usize = 3;

fn loss(tape: &mut Tape, x: &Tensor, w1: &Tensor, w2: &Tensor, targets: &[usize]) -> spg::Result<(Var, Var)> {
    let x = tape.constant(x.clone())?;
    let w1v = tape.leaf(w1.clone().with_grad())?;
    let w2v = tape.constant(w2.clone())?;
    let h = tape.matmul(x, w1v)?;
    let h = tape.relu(h)?;
    let logits = tape.matmul(h, w2v)?;
    let logp = tape.log_softmax(logits)?;
    let picked = tape.gather(logp, targets)?;
    Ok((tape.mean_all(picked)?, w1v))
}

fn main() -> spg::Result<()> {
    let mut rng = RngStream::new(7, 0);
    let mut rand = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect() };
    let x = Tensor::new(vec![ROWS, IN], rand(ROWS * IN))?;
    let w1 = Tensor::new(vec![IN, HIDDEN], rand(IN * HIDDEN))?;
    let w2 = Tensor::new(vec![HIDDEN, CLASSES], rand(HIDDEN * CLASSES))?;
    let targets = [0, 1, 2, 1, 0];

    let mut tape = Tape::new();
    let (l, w1v) = loss(&mut tape, &x, &w1, &w2, &targets)?;
    let grads = tape.backward(l)?;
    let analytic = grads.get(w1v).expect("leaf gradient").to_vec();

    let numeric = central_difference(
        |p| {
            let mut t = Tape::new();
            let (l, _) = loss(&mut t, &x, &Tensor::new(vec![IN, HIDDEN], p.to_vec())?, &w2, &targets)?;
            Ok(t.value(l).data()[0])
        },
        w1.data(),
        1e-6,
    )?;
    let worst = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max);
    println!("hand-built classifier: {} partials, max rel err {worst:.2e}", analytic.len());

    for (prim, shapes) in primitive_cases() {
        let r = check_primitive(&prim, &shapes, 0)?;
        println!("{:<12} {:>4} partials  max rel err {:.2e}", prim.name(), r.checked, r.max_rel_error);
    }
    Ok(())
}
