use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Result, SpgError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    AdamW,
}

impl std::str::FromStr for OptimizerKind {
    type Err = SpgError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adamw" | "adam" => Ok(OptimizerKind::AdamW),
            other => Err(SpgError::invalid(format!("unknown optimizer {other}"))),
        }
    }
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::AdamW => "adamw",
        }
    }

    pub fn is_adaptive(self) -> bool {
        matches!(self, OptimizerKind::AdamW)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerHyper {
    fn default() -> Self {
        OptimizerHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Plain SGD or AdamW with bias correction and decoupled weight decay.
///
/// The moments are updated from the gradients on every step regardless of
/// the effective learning rate; parameters are left untouched when it is 0.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub hyper: OptimizerHyper,
    pub step: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, hyper: OptimizerHyper, params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = if kind.is_adaptive() {
            params.iter().map(|(_, t)| vec![0.0; t.len()]).collect()
        } else {
            Vec::new()
        };
        OptimizerState {
            kind,
            hyper,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    /// Apply one update using the gradients stored on `params`. Parameters
    /// without a gradient are treated as having a zero gradient.
    pub fn step(&mut self, params: &mut ParamStore, lr_override: Option<f64>) -> Result<()> {
        let lr = lr_override.unwrap_or(self.hyper.lr);
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(SpgError::invalid(format!("learning rate must be >= 0, got {lr}")));
        }
        if self.kind.is_adaptive() && self.first_moment.len() != params.len() {
            return Err(SpgError::Shape {
                op: "optimizer_step",
                lhs: vec![self.first_moment.len()],
                rhs: vec![params.len()],
            });
        }
        for id in params.ids() {
            let t = params.get(id);
            if let Some(g) = &t.grad {
                if g.len() != t.len() {
                    return Err(SpgError::Shape {
                        op: "optimizer_step",
                        lhs: t.shape().to_vec(),
                        rhs: vec![g.len()],
                    });
                }
            }
            if self.kind.is_adaptive() && self.first_moment[id.index()].len() != t.len() {
                return Err(SpgError::Shape {
                    op: "optimizer_step",
                    lhs: t.shape().to_vec(),
                    rhs: vec![self.first_moment[id.index()].len()],
                });
            }
        }

        self.step += 1;
        let h = self.hyper;
        let bc1 = 1.0 - h.beta1.powi(self.step.min(i32::MAX as u64) as i32);
        let bc2 = 1.0 - h.beta2.powi(self.step.min(i32::MAX as u64) as i32);
        for id in params.ids().collect::<Vec<_>>() {
            let t = params.get_mut(id);
            let grad = t.grad.take().unwrap_or_else(|| vec![0.0; t.len()]);
            match self.kind {
                OptimizerKind::Sgd => {
                    if lr != 0.0 {
                        for (p, g) in t.data_mut().iter_mut().zip(&grad) {
                            *p -= lr * g;
                        }
                    }
                }
                OptimizerKind::AdamW => {
                    let m = &mut self.first_moment[id.index()];
                    let v = &mut self.second_moment[id.index()];
                    for ((mi, vi), g) in m.iter_mut().zip(v.iter_mut()).zip(&grad) {
                        *mi = h.beta1 * *mi + (1.0 - h.beta1) * g;
                        *vi = h.beta2 * *vi + (1.0 - h.beta2) * g * g;
                    }
                    if lr != 0.0 {
                        let decay = 1.0 - lr * h.weight_decay;
                        for ((p, mi), vi) in t.data_mut().iter_mut().zip(m.iter()).zip(v.iter()) {
                            let mhat = mi / bc1;
                            let vhat = vi / bc2;
                            *p = *p * decay - lr * mhat / (vhat.sqrt() + h.eps);
                        }
                    }
                }
            }
            t.grad = Some(grad);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn store_with(value: f64, grad: f64) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::scalar(value)).unwrap();
        s.get_mut(id).grad = Some(vec![grad]);
        s
    }

    #[test]
    fn sgd_definition() {
        let mut s = store_with(1.0, 2.0);
        let mut opt = OptimizerState::new(OptimizerKind::Sgd, OptimizerHyper { lr: 0.1, ..Default::default() }, &s);
        opt.step(&mut s, None).unwrap();
        assert!((s.iter().next().unwrap().1.data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_moves_moments_only() {
        let mut s = store_with(1.5, 0.3);
        let before = s.clone();
        let mut opt = OptimizerState::new(OptimizerKind::AdamW, OptimizerHyper { weight_decay: 0.01, ..Default::default() }, &s);
        opt.step(&mut s, Some(0.0)).unwrap();
        assert!(s.iter().next().unwrap().1.bit_eq(before.iter().next().unwrap().1));
        assert!(opt.first_moment[0][0] != 0.0);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn two_adam_steps_match_closed_form() {
        // hand-unrolled recurrence with constant gradient g
        let (p0, g, lr, b1, b2, eps, wd) = (0.7, 0.25, 0.01, 0.9, 0.999, 1e-8, 0.1);
        let mut p = p0;
        let (mut m, mut v) = (0.0, 0.0);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mhat = m / (1.0 - f64::powi(b1, t));
            let vhat = v / (1.0 - f64::powi(b2, t));
            p = p * (1.0 - lr * wd) - lr * mhat / (vhat.sqrt() + eps);
        }
        // with a constant gradient both bias-corrected moments equal g and g^2
        let mut closed = p0;
        for _ in 0..2 {
            closed = closed * (1.0 - lr * wd) - lr * g / (g.abs() + eps);
        }
        assert!((p - closed).abs() < 1e-12);

        let mut s = store_with(p0, g);
        let hyper = OptimizerHyper { lr, beta1: b1, beta2: b2, eps, weight_decay: wd };
        let mut opt = OptimizerState::new(OptimizerKind::AdamW, hyper, &s);
        opt.step(&mut s, None).unwrap();
        s.get_mut(crate::autodiff::ParamId(0)).grad = Some(vec![g]);
        opt.step(&mut s, None).unwrap();
        let got = s.iter().next().unwrap().1.data()[0];
        assert!((got - closed).abs() < 1e-12, "{got} vs {closed}");
    }

    #[test]
    fn negative_lr_rejected() {
        let mut s = store_with(1.0, 1.0);
        let mut opt = OptimizerState::new(OptimizerKind::Sgd, OptimizerHyper::default(), &s);
        assert!(opt.step(&mut s, Some(-1.0)).is_err());
    }

    #[test]
    fn moment_shape_mismatch_rejected() {
        let mut s = store_with(1.0, 1.0);
        let mut opt = OptimizerState::new(OptimizerKind::AdamW, OptimizerHyper::default(), &s);
        s.add("q", Tensor::scalar(0.0)).unwrap();
        assert!(opt.step(&mut s, None).is_err());
    }
}
