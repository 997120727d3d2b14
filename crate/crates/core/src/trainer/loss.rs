use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Result, SpgError};
use crate::trajectory::{grouped_scale, MaskSeries};

/// Masked, weighted log-likelihood over one stream's replica depths:
///
/// `L = -Σ_i (1/m) (1/|τ_i|) Σ_t w_t [M_t]_i log softmax(π_t^(i))_{c_i}`
///
/// `m` is the effective batch size over all streams, so the losses of
/// several streams sharing one update are simply added. Depths whose
/// coefficients are all zero are left out of the graph.
pub fn surrogate_loss(
    tape: &mut Tape,
    logits: &[Var],
    targets: &[usize],
    masks: &MaskSeries,
    weights: &[f64],
    m: usize,
    step_lengths: &[usize],
) -> Result<Var> {
    let units = targets.len();
    if logits.len() != masks.depth() + 1 || weights.len() != logits.len() {
        return Err(SpgError::Shape {
            op: "surrogate_loss",
            lhs: vec![logits.len()],
            rhs: vec![masks.depth() + 1, weights.len()],
        });
    }
    if masks.units() != units || step_lengths.len() != units {
        return Err(SpgError::Shape {
            op: "surrogate_loss",
            lhs: vec![units],
            rhs: vec![masks.units(), step_lengths.len()],
        });
    }
    let scale = grouped_scale(m, step_lengths)?;
    let mut total: Option<Var> = None;
    for (t, (&pi, &w)) in logits.iter().zip(weights).enumerate() {
        let shape = tape.shape(pi);
        if shape.len() != 2 || shape[0] != units {
            return Err(SpgError::Shape {
                op: "surrogate_loss",
                lhs: vec![units],
                rhs: shape.to_vec(),
            });
        }
        let coef: Vec<f64> = masks
            .at(t)
            .iter()
            .zip(&scale)
            .map(|(&mask, &s)| -(w * f64::from(u8::from(mask)) * s))
            .collect();
        if coef.iter().all(|&c| c == 0.0) {
            continue;
        }
        let lp = tape.log_softmax(pi)?;
        let picked = tape.gather(lp, targets)?;
        let c = tape.constant(Tensor::new(vec![units], coef)?)?;
        let weighted = tape.mul(picked, c)?;
        let term = tape.sum_all(weighted)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    match total {
        Some(v) => Ok(v),
        None => tape.constant(Tensor::scalar(0.0)),
    }
}

/// Mean cross-entropy of `π_0` over all units of all streams.
pub fn cross_entropy(tape: &mut Tape, logits: &[Var], targets: &[usize]) -> Result<Var> {
    let m = targets.len() * logits.len();
    let mut total: Option<Var> = None;
    for &pi in logits {
        let lp = tape.log_softmax(pi)?;
        let picked = tape.gather(lp, targets)?;
        let mean = tape.mean_all(picked)?;
        let factor = -(targets.len() as f64 / m as f64);
        let c = tape.constant(Tensor::scalar(factor))?;
        let term = tape.mul(mean, c)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| SpgError::invalid("cross entropy needs at least one stream"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::mask_series;

    fn logits(tape: &mut Tape, rows: &[&[f64]]) -> Var {
        tape.leaf(Tensor::from_rows(rows).unwrap().with_grad()).unwrap()
    }

    #[test]
    fn masked_depth_gets_no_gradient() {
        let mut tape = Tape::new();
        let p0 = logits(&mut tape, &[&[1.0, 0.0], &[0.0, 1.0]]);
        let p1 = logits(&mut tape, &[&[0.3, 0.1], &[0.2, 0.5]]);
        // unit 0 correct at depth 0, unit 1 wrong
        let masks = mask_series(&[vec![true], vec![false]], 2, 1).unwrap();
        let lengths = masks.step_lengths();
        let loss = surrogate_loss(&mut tape, &[p0, p1], &[0, 0], &masks, &[1.0, 0.4], 2, &lengths).unwrap();
        let g = tape.backward(loss).unwrap();
        let g1 = g.get(p1).unwrap();
        assert_eq!(&g1[2..], &[0.0, 0.0]);
        assert!(g1[0] != 0.0);
    }

    #[test]
    fn single_depth_equals_cross_entropy_value() {
        let mut tape = Tape::new();
        let p0 = logits(&mut tape, &[&[1.0, 0.0, 0.5], &[0.0, 1.0, 2.0], &[0.1, 0.1, 0.1]]);
        let masks = mask_series(&[vec![], vec![], vec![]], 3, 0).unwrap();
        let l = surrogate_loss(&mut tape, &[p0], &[0, 2, 1], &masks, &[1.0], 3, &[1, 1, 1]).unwrap();
        let ce = cross_entropy(&mut tape, &[p0], &[0, 2, 1]).unwrap();
        let (a, b) = (tape.value(l).data()[0], tape.value(ce).data()[0]);
        assert!((a - b).abs() < 1e-15);
        let ga = tape.backward(l).unwrap().get(p0).unwrap().to_vec();
        let gb = tape.backward(ce).unwrap().get(p0).unwrap().to_vec();
        assert_eq!(ga, gb);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut tape = Tape::new();
        let p0 = logits(&mut tape, &[&[1.0, 0.0]]);
        let masks = mask_series(&[vec![], vec![]], 2, 0).unwrap();
        assert!(surrogate_loss(&mut tape, &[p0], &[0, 1], &masks, &[1.0], 2, &[1, 1]).is_err());
    }
}
