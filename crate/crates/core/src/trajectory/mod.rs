//! Padded-episode calculus.
//!
//! Each unit (image, pixel-output or token) is an independent episode of
//! fixed length `T + 1`. The ternary observed state `o` starts at 1 and is
//! driven by whether the prediction at each depth is correct:
//! `o' = o * (o + correct) - 1`. Rewards are `1{o >= 0}` and the return of a
//! padded window is its (optionally weighted) reward sum times its final
//! reward. The trainer gates loss terms with positional masks, the running
//! product of correctness indicators.

mod enumerate;

pub use enumerate::{
    enumerate_nonzero_returns, enumerate_with, truth_table, Enumeration, PatternRecord, StepFn,
    EXPECTED_TRUTH_TABLE, MAX_ENUMERATION_DEPTH,
};

use serde::{Deserialize, Serialize};

use crate::error::{Result, SpgError};
use crate::tasks::TaskKind;

/// Ternary observed state: 1 continue, 0 normal termination, -1 dummy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ObservedState(i8);

impl ObservedState {
    pub const CONTINUE: ObservedState = ObservedState(1);
    pub const TERMINATED: ObservedState = ObservedState(0);
    pub const DUMMY: ObservedState = ObservedState(-1);

    pub fn new(value: i8) -> Result<Self> {
        if (-1..=1).contains(&value) {
            Ok(ObservedState(value))
        } else {
            Err(SpgError::invalid(format!("observed state must be in {{-1, 0, 1}}, got {value}")))
        }
    }

    pub fn value(self) -> i8 {
        self.0
    }
}

pub fn step_observed(o: ObservedState, correct: bool) -> ObservedState {
    let c = i8::from(correct);
    ObservedState(o.0 * (o.0 + c) - 1)
}

pub fn state_reward(o: ObservedState) -> u8 {
    u8::from(o.0 >= 0)
}

/// `λ_1..λ_T`; depth 0 always carries weight 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReturnWeights(Vec<f64>);

impl ReturnWeights {
    pub fn new(lambdas: Vec<f64>) -> Result<Self> {
        if lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(SpgError::invalid(format!(
                "return weights must be finite and non-negative, got {lambdas:?}"
            )));
        }
        Ok(ReturnWeights(lambdas))
    }

    /// (0.4, 0.2, 0.1)
    pub fn standard() -> Self {
        ReturnWeights(vec![0.4, 0.2, 0.1])
    }

    /// `first, first/2, first/4, ...` with `len` entries; `halving(0.4, 3)`
    /// is [`ReturnWeights::standard`].
    pub fn halving(first: f64, len: usize) -> Self {
        ReturnWeights((0..len).map(|k| first / f64::from(1u32 << k.min(31))).collect())
    }

    /// All-ones weights, which turn the weighted return into the plain one.
    pub fn ones(len: usize) -> Self {
        ReturnWeights(vec![1.0; len])
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `w_0 = 1`, `w_t = λ_t`.
    pub fn depth_weight(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        self.0.get(t - 1).copied().ok_or(SpgError::OutOfRange {
            what: "return weight",
            index: t,
            bound: self.0.len() + 1,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReturnForm {
    Weighted,
    Unweighted,
}

/// `(r_0 + λ_1 r_1 + ... + λ_{n-1} r_{n-1}) * r_{n-1}` over the given rewards,
/// or the unweighted sum when `weights` is `None`.
pub fn padded_return(rewards: &[u8], weights: Option<&ReturnWeights>) -> Result<f64> {
    let Some(&last) = rewards.last() else {
        return Err(SpgError::invalid("padded_return needs at least one reward"));
    };
    let mut total = 0.0;
    for (t, &r) in rewards.iter().enumerate() {
        let w = match weights {
            Some(w) => w.depth_weight(t)?,
            None => 1.0,
        };
        total += w * f64::from(r);
    }
    Ok(total * f64::from(last))
}

/// `([π]_c, 1 - [π]_c)` for a normalised distribution `π`.
pub fn policy_readout(probs: &[f64], class: usize) -> Result<(f64, f64)> {
    if class >= probs.len() {
        return Err(SpgError::OutOfRange {
            what: "class",
            index: class,
            bound: probs.len(),
        });
    }
    let total: f64 = probs.iter().sum();
    if probs.iter().any(|p| !(0.0..=1.0).contains(p)) || (total - 1.0).abs() > 1e-9 {
        return Err(SpgError::invalid("policy readout expects a probability distribution"));
    }
    Ok((probs[class], 1.0 - probs[class]))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Binary masks `M_0..M_T` over `m` units.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSeries {
    units: usize,
    masks: Vec<Vec<bool>>,
}

impl MaskSeries {
    pub fn units(&self) -> usize {
        self.units
    }

    /// `T`, the number of replica depths beyond the base.
    pub fn depth(&self) -> usize {
        self.masks.len() - 1
    }

    pub fn at(&self, t: usize) -> &[bool] {
        &self.masks[t]
    }

    /// `M_0..M_T` for one unit.
    pub fn unit(&self, i: usize) -> Vec<bool> {
        self.masks.iter().map(|m| m[i]).collect()
    }

    /// Fraction of units with `M_t = 1`, for each `t`.
    pub fn survival(&self) -> Vec<f64> {
        self.masks
            .iter()
            .map(|m| m.iter().filter(|&&b| b).count() as f64 / self.units as f64)
            .collect()
    }

    pub fn step_lengths(&self) -> Vec<usize> {
        let t = self.depth();
        (0..self.units).map(|i| step_length(&self.unit(i), t)).collect()
    }
}

/// `M_0 = 1`, `M_{t+1} = M_t * correct_t`. `correct[i]` holds the
/// correctness of `π_0..π_{T-1}` for unit `i`.
pub fn mask_series(correct: &[Vec<bool>], m: usize, t: usize) -> Result<MaskSeries> {
    if correct.len() != m || correct.iter().any(|c| c.len() != t) {
        return Err(SpgError::Shape {
            op: "mask_series",
            lhs: vec![m, t],
            rhs: vec![correct.len(), correct.first().map_or(0, Vec::len)],
        });
    }
    if m == 0 {
        return Err(SpgError::invalid("mask_series needs at least one unit"));
    }
    let mut masks = vec![vec![true; m]];
    for depth in 0..t {
        let next = masks[depth]
            .iter()
            .zip(correct)
            .map(|(&prev, c)| prev && c[depth])
            .collect();
        masks.push(next);
    }
    Ok(MaskSeries { units: m, masks })
}

/// `min(1 + Σ_{t=1..T} M_t, T)`, taken as 1 when there are no replicas.
pub fn step_length(unit_masks: &[bool], t: usize) -> usize {
    let survived = unit_masks.iter().skip(1).take(t).filter(|&&b| b).count();
    (1 + survived).min(t.max(1))
}

/// `(1/m) * (1/|τ_i|)` per unit.
pub fn grouped_scale(m: usize, lengths: &[usize]) -> Result<Vec<f64>> {
    if m == 0 {
        return Err(SpgError::invalid("effective batch size must be positive"));
    }
    if lengths.contains(&0) {
        return Err(SpgError::invalid("step lengths must be at least 1"));
    }
    let inv_m = 1.0 / m as f64;
    Ok(lengths.iter().map(|&l| inv_m * (1.0 / l as f64)).collect())
}

/// Shape of the reward-unit layout: `[N]`, `[N, H, W, 2]` or `[N, L]`.
pub fn unit_layout(kind: TaskKind, dims: &[usize]) -> Result<Vec<usize>> {
    let want = match kind {
        TaskKind::Classification => 1,
        TaskKind::Segmentation => 3,
        TaskKind::LanguageModeling => 2,
    };
    if dims.len() != want || dims.contains(&0) {
        return Err(SpgError::invalid(format!(
            "{} geometry needs {want} positive dims, got {dims:?}",
            kind.name()
        )));
    }
    let mut layout = dims.to_vec();
    if kind == TaskKind::Segmentation {
        layout.push(2);
    }
    Ok(layout)
}

/// Number of independent reward units per update.
pub fn effective_batch_size(kind: TaskKind, dims: &[usize]) -> Result<usize> {
    Ok(unit_layout(kind, dims)?.iter().product())
}

/// Padded episodes for a batch of `m` units.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeBatch {
    pub depth: usize,
    pub targets: Vec<usize>,
    /// predicted class at depths `0..=T`, per unit
    pub predictions: Vec<Vec<usize>>,
    pub correct: Vec<Vec<bool>>,
    pub observed: Vec<Vec<ObservedState>>,
    pub rewards: Vec<Vec<u8>>,
    pub step_lengths: Vec<usize>,
    pub returns: Vec<f64>,
    pub masks: MaskSeries,
}

impl EpisodeBatch {
    /// Build episodes from per-depth logits (`logits[t]` is `m x V`, row-major).
    pub fn from_logits(
        logits: &[&[f64]],
        classes: usize,
        targets: &[usize],
        weights: Option<&ReturnWeights>,
    ) -> Result<Self> {
        let m = targets.len();
        if logits.is_empty() || logits.iter().any(|l| l.len() != m * classes) {
            return Err(SpgError::Shape {
                op: "episode_batch",
                lhs: vec![m, classes],
                rhs: vec![logits.first().map_or(0, |l| l.len())],
            });
        }
        let predictions: Vec<Vec<usize>> = (0..m)
            .map(|i| {
                logits
                    .iter()
                    .map(|l| argmax(&l[i * classes..(i + 1) * classes]))
                    .collect()
            })
            .collect();
        Self::from_predictions(predictions, targets, weights)
    }

    pub fn from_predictions(
        predictions: Vec<Vec<usize>>,
        targets: &[usize],
        weights: Option<&ReturnWeights>,
    ) -> Result<Self> {
        let m = targets.len();
        if predictions.len() != m || m == 0 {
            return Err(SpgError::invalid("one prediction row per target required"));
        }
        let depth = predictions[0].len() - 1;
        let correct: Vec<Vec<bool>> = predictions
            .iter()
            .zip(targets)
            .map(|(p, &c)| p.iter().map(|&k| k == c).collect())
            .collect();
        let gating: Vec<Vec<bool>> = correct.iter().map(|c| c[..depth].to_vec()).collect();
        let masks = mask_series(&gating, m, depth)?;
        let mut observed = Vec::with_capacity(m);
        let mut rewards = Vec::with_capacity(m);
        let mut returns = Vec::with_capacity(m);
        for c in &gating {
            let mut o = vec![ObservedState::CONTINUE];
            for &bit in c {
                o.push(step_observed(*o.last().expect("non-empty"), bit));
            }
            let r: Vec<u8> = o.iter().map(|&s| state_reward(s)).collect();
            returns.push(padded_return(&r, weights)?);
            observed.push(o);
            rewards.push(r);
        }
        let step_lengths = masks.step_lengths();
        Ok(EpisodeBatch {
            depth,
            targets: targets.to_vec(),
            predictions,
            correct,
            observed,
            rewards,
            step_lengths,
            returns,
            masks,
        })
    }

    pub fn units(&self) -> usize {
        self.targets.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn o(v: i8) -> ObservedState {
        ObservedState::new(v).unwrap()
    }

    #[test]
    fn step_cases() {
        assert_eq!(step_observed(o(1), true), o(1));
        assert_eq!(step_observed(o(1), false), o(0));
        assert_eq!(step_observed(o(0), true), o(-1));
        assert_eq!(step_observed(o(0), false), o(-1));
        assert_eq!(step_observed(o(-1), true), o(-1));
        assert_eq!(step_observed(o(-1), false), o(0));
        assert!(ObservedState::new(2).is_err());
    }

    #[test]
    fn rewards() {
        assert_eq!(state_reward(o(1)), 1);
        assert_eq!(state_reward(o(0)), 1);
        assert_eq!(state_reward(o(-1)), 0);
    }

    #[test]
    fn returns() {
        let w = ReturnWeights::standard();
        let r = padded_return(&[1, 1, 1, 1], Some(&w)).unwrap();
        assert!((r - 1.7).abs() < 1e-12);
        assert_eq!(padded_return(&[1, 1, 0], None).unwrap(), 0.0);
        assert_eq!(padded_return(&[1, 1, 0], Some(&w)).unwrap(), 0.0);
        assert_eq!(padded_return(&[1, 1, 1], None).unwrap(), 3.0);
        assert!(padded_return(&[], None).is_err());
        // more rewards than weights
        assert!(padded_return(&[1; 5], Some(&w)).is_err());
        assert_eq!(ReturnWeights::halving(0.4, 3), w);
        assert!(ReturnWeights::new(vec![0.1, -0.2]).is_err());
    }

    #[test]
    fn readout() {
        assert_eq!(policy_readout(&[0.25; 4], 3).unwrap(), (0.25, 0.75));
        assert_eq!(policy_readout(&[0.0, 1.0, 0.0], 1).unwrap(), (1.0, 0.0));
        let e = 1f64.exp();
        let z = e * e + e + 1.0;
        let probs = [e * e / z, e / z, 1.0 / z];
        let (pc, ps) = policy_readout(&probs, 0).unwrap();
        assert!((pc - e * e / z).abs() < 1e-15 && (ps - (1.0 - e * e / z)).abs() < 1e-15);
        assert!(policy_readout(&[0.5, 0.5], 2).is_err());
        assert!(policy_readout(&[0.5, 0.6], 0).is_err());
    }

    #[test]
    fn masks() {
        let m = mask_series(&[vec![true, true, false]], 1, 3).unwrap();
        assert_eq!(m.unit(0), vec![true, true, true, false]);
        let m = mask_series(&[vec![true; 3]], 1, 3).unwrap();
        assert_eq!(m.unit(0), vec![true; 4]);
        let m = mask_series(&[vec![false, true, true]], 1, 3).unwrap();
        assert_eq!(m.unit(0), vec![true, false, false, false]);
        assert!(mask_series(&[vec![true, true]], 1, 3).is_err());
        assert!(mask_series(&[vec![true; 3]], 2, 3).is_err());
    }

    #[test]
    fn step_lengths_from_trajectory_figure() {
        let lengths = mask_series(
            &[vec![true, false, false], vec![true, true, true], vec![false, true, true]],
            3,
            3,
        )
        .unwrap()
        .step_lengths();
        assert_eq!(lengths, vec![2, 3, 1]);
        assert_eq!(step_length(&[true], 0), 1);
    }

    #[test]
    fn grouped_scales() {
        assert_eq!(grouped_scale(1, &[1]).unwrap(), vec![1.0]);
        assert_eq!(grouped_scale(4, &[2]).unwrap(), vec![0.125]);
        let s = grouped_scale(3, &[2, 3, 1]).unwrap();
        let expect = [1.0 / 6.0, 1.0 / 9.0, 1.0 / 3.0];
        for (a, b) in s.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(grouped_scale(3, &[0]).is_err());
        assert!(grouped_scale(0, &[1]).is_err());
    }

    #[test]
    fn batch_sizes() {
        assert_eq!(effective_batch_size(TaskKind::Classification, &[3]).unwrap(), 3);
        assert_eq!(effective_batch_size(TaskKind::Segmentation, &[1, 180, 360]).unwrap(), 129_600);
        assert_eq!(unit_layout(TaskKind::Segmentation, &[1, 180, 360]).unwrap(), vec![1, 180, 360, 2]);
        assert_eq!(effective_batch_size(TaskKind::LanguageModeling, &[2, 3]).unwrap(), 6);
        assert!(effective_batch_size(TaskKind::LanguageModeling, &[2]).is_err());
        assert!("video".parse::<TaskKind>().is_err());
    }

    #[test]
    fn episode_batch_padding() {
        let b = EpisodeBatch::from_predictions(
            vec![vec![0, 1, 1, 1], vec![0, 0, 0, 0], vec![2, 0, 0, 0]],
            &[0, 0, 0],
            Some(&ReturnWeights::standard()),
        )
        .unwrap();
        assert!(b.observed.iter().all(|o| o.len() == 4));
        assert_eq!(b.step_lengths, vec![2, 3, 1]);
        assert_eq!(b.returns[2], 0.0);
        assert!((b.returns[1] - 1.7).abs() < 1e-12);
    }

    #[test]
    fn argmax_ties_lowest() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0, 2.0]), 0);
    }
}
