//! Central finite differences against the tape's analytic gradients.
//!
//! The numerical side only ever calls forward evaluations, so it stays
//! independent of every backward rule it checks.

use super::params::{ParamId, ParamStore};
use super::rng::RngStream;
use super::tape::{Primitive, Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor so that gradients which are numerically zero are
/// compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub fn central_difference<F>(mut f: F, point: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut x = point.to_vec();
    let mut out = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        x[i] = point[i] + step;
        let plus = f(&x)?;
        x[i] = point[i] - step;
        let minus = f(&x)?;
        x[i] = point[i];
        out.push((plus - minus) / (2.0 * step));
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub label: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

fn random_tensor(shape: &[usize], rng: &mut RngStream, avoid_zero: bool) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v = rng.uniform(-2.0, 2.0);
            if !avoid_zero || v.abs() > 0.05 {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("valid shape")
}

/// A representative instance of every primitive with input shapes.
pub fn primitive_cases() -> Vec<(Primitive, Vec<Vec<usize>>)> {
    vec![
        (Primitive::MatMul, vec![vec![3, 4], vec![4, 2]]),
        (Primitive::Add, vec![vec![2, 3], vec![2, 3]]),
        (Primitive::Mul, vec![vec![2, 3], vec![2, 3]]),
        (Primitive::AddBias, vec![vec![3, 4], vec![4]]),
        (Primitive::Relu, vec![vec![2, 5]]),
        (Primitive::LogSoftmax, vec![vec![3, 4]]),
        (Primitive::Gather(vec![1, 3, 0]), vec![vec![3, 4]]),
        (
            Primitive::Embedding {
                indices: vec![0, 4, 4, 2, 1, 0],
                window: 2,
            },
            vec![vec![5, 3]],
        ),
        (Primitive::Sum(vec![1]), vec![vec![2, 3, 4]]),
        (Primitive::Mean(vec![0, 2]), vec![vec![2, 3, 4]]),
    ]
}

/// Check one primitive as a vector-Jacobian product: the scalar
/// `sum(out * r)` for a fixed random `r` is differentiated with respect to
/// every input element.
pub fn check_primitive(prim: &Primitive, shapes: &[Vec<usize>], seed: u64) -> Result<GradCheckReport> {
    let mut rng = RngStream::new(seed, 0x6c);
    let avoid_zero = matches!(prim, Primitive::Relu);
    let inputs: Vec<Tensor> = shapes.iter().map(|s| random_tensor(s, &mut rng, avoid_zero)).collect();

    let eval = |vals: &[Tensor], probe: &mut RngStream| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars = vals
            .iter()
            .map(|t| tape.leaf(t.clone().with_grad()))
            .collect::<Result<Vec<_>>>()?;
        let out = tape.apply(prim, &vars)?;
        let r = random_tensor(tape.shape(out), probe, false);
        let r = tape.constant(r)?;
        let prod = tape.mul(out, r)?;
        let loss = tape.sum_all(prod)?;
        Ok((tape, vars, loss))
    };

    let probe_seed = RngStream::new(seed, 0x6d);
    let (tape, vars, loss) = eval(&inputs, &mut probe_seed.clone())?;
    let grads = tape.backward(loss)?;

    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        let numeric = central_difference(
            |x| {
                let mut vals = inputs.clone();
                vals[k] = Tensor::new(inputs[k].shape().to_vec(), x.to_vec())?;
                let (t, _, l) = eval(&vals, &mut probe_seed.clone())?;
                Ok(t.value(l).data()[0])
            },
            inputs[k].data(),
            FD_STEP,
        )?;
        for (a, n) in analytic.iter().zip(&numeric) {
            worst = worst.max(relative_error(*a, *n));
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        label: prim.name().to_string(),
        checked,
        max_rel_error: worst,
    })
}

/// Check the gradient of a scalar loss with respect to every listed parameter.
/// `build` must be deterministic in the store's values (reseed any
/// randomness inside it).
pub fn check_params<F>(store: &ParamStore, ids: &[ParamId], label: &str, build: F) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<(Tape, Var)>,
{
    let (tape, loss) = build(store)?;
    let grads = tape.backward(loss)?;
    let mut analytic_store = store.clone();
    grads.write_to(&tape, &mut analytic_store);

    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for &id in ids {
        let analytic = analytic_store
            .get(id)
            .grad
            .clone()
            .unwrap_or_else(|| vec![0.0; store.get(id).len()]);
        let numeric = central_difference(
            |x| {
                let mut s = store.clone();
                s.get_mut(id).data_mut().copy_from_slice(x);
                let (t, l) = build(&s)?;
                Ok(t.value(l).data()[0])
            },
            store.get(id).data(),
            FD_STEP,
        )?;
        for (a, n) in analytic.iter().zip(&numeric) {
            worst = worst.max(relative_error(*a, *n));
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        label: label.to_string(),
        checked,
        max_rel_error: worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_of_quadratic() {
        let g = central_difference(|v| Ok(v[0] * v[0] + 3.0 * v[1]), &[2.0, -1.0], 1e-5).unwrap();
        assert!((g[0] - 4.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn every_primitive_passes() {
        for seed in 0..3 {
            for (prim, shapes) in primitive_cases() {
                let r = check_primitive(&prim, &shapes, seed).unwrap();
                assert!(r.passes(1e-5), "{} seed {seed}: {}", r.label, r.max_rel_error);
                assert!(r.checked > 0);
            }
        }
    }
}
