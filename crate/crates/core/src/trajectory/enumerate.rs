//! Exhaustive oracles over all `2^T` correctness patterns.

use serde::Serialize;

use super::{mask_series, padded_return, state_reward, step_observed, ObservedState, ReturnWeights};
use crate::error::{Result, SpgError};

pub type StepFn = fn(ObservedState, bool) -> ObservedState;

pub const MAX_ENUMERATION_DEPTH: usize = 8;

/// Expected transitions for `(o, correct)` in the order
/// (1,1) (1,0) (0,1) (0,0) (-1,1) (-1,0).
pub const EXPECTED_TRUTH_TABLE: [i8; 6] = [1, 0, -1, -1, -1, 0];

/// Evaluate a transition function on its whole six-case domain, in the
/// order of [`EXPECTED_TRUTH_TABLE`].
pub fn truth_table(step: StepFn) -> [i8; 6] {
    let mut out = [0i8; 6];
    let mut k = 0;
    for o in [1i8, 0, -1] {
        for correct in [true, false] {
            out[k] = step(ObservedState(o), correct).value();
            k += 1;
        }
    }
    out
}

/// One correctness pattern simulated through a padded window of `T + 1` states.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PatternRecord {
    #[serde(rename = "T")]
    pub depth: usize,
    /// correctness of the predictions at depths `0..T`
    pub pattern: Vec<u8>,
    pub o_trace: Vec<i8>,
    pub rewards: Vec<u8>,
    pub masks: Vec<u8>,
    pub return_weighted: f64,
    pub return_unweighted: f64,
    pub nonzero_return: bool,
    /// membership in `{a_0 = ... = a_{|τ|-3}, o_{|τ|-1} >= 0}` with `|τ| = T + 1`
    pub eq10_member: bool,
    /// the trace climbs from -1 back to 0 somewhere
    pub resurrection: bool,
    /// depths where the positional mask and the state reward disagree
    pub mask_reward_divergences: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Enumeration {
    pub depth: usize,
    pub records: Vec<PatternRecord>,
}

impl Enumeration {
    pub fn nonzero_patterns(&self) -> Vec<Vec<u8>> {
        self.records
            .iter()
            .filter(|r| r.nonzero_return)
            .map(|r| r.pattern.clone())
            .collect()
    }

    pub fn zero_patterns(&self) -> Vec<Vec<u8>> {
        self.records
            .iter()
            .filter(|r| !r.nonzero_return)
            .map(|r| r.pattern.clone())
            .collect()
    }

    /// Patterns where the non-zero-return set and the characterisation disagree.
    pub fn mismatches(&self) -> Vec<&PatternRecord> {
        self.records
            .iter()
            .filter(|r| r.nonzero_return != r.eq10_member)
            .collect()
    }

    /// Set identity over the patterns whose trace never resurrects.
    pub fn identity_holds_without_resurrection(&self) -> bool {
        self.mismatches().iter().all(|r| r.resurrection)
    }

    pub fn identity_holds(&self) -> bool {
        self.mismatches().is_empty()
    }

    pub fn resurrection_count(&self) -> usize {
        self.records.iter().filter(|r| r.resurrection).count()
    }

    /// `(T, pattern, t)` for every mask/reward disagreement.
    pub fn divergences(&self) -> Vec<(Vec<u8>, usize)> {
        self.records
            .iter()
            .flat_map(|r| r.mask_reward_divergences.iter().map(|&t| (r.pattern.clone(), t)))
            .collect()
    }

    /// `M_t = 1` implies `r_t = 1` everywhere.
    pub fn mask_bounds_reward(&self) -> bool {
        self.records
            .iter()
            .all(|r| r.masks.iter().zip(&r.rewards).all(|(&m, &rw)| m == 0 || rw == 1))
    }

    pub fn masks_monotone(&self) -> bool {
        self.records
            .iter()
            .all(|r| r.masks.windows(2).all(|w| w[1] <= w[0]))
    }

    /// Zero final reward forces a zero return in both forms.
    pub fn returns_annihilate(&self) -> bool {
        self.records.iter().all(|r| {
            r.rewards.last() != Some(&0) || (r.return_weighted == 0.0 && r.return_unweighted == 0.0)
        })
    }

    pub fn padded(&self) -> bool {
        self.records.iter().all(|r| {
            r.o_trace.len() == self.depth + 1
                && r.rewards.len() == self.depth + 1
                && r.masks.len() == self.depth + 1
        })
    }

    pub fn closed(&self) -> bool {
        self.records
            .iter()
            .all(|r| r.o_trace.iter().all(|o| (-1..=1).contains(o)))
    }
}

pub fn enumerate_nonzero_returns(depth: usize) -> Result<Enumeration> {
    enumerate_with(depth, step_observed, &ReturnWeights::halving(0.4, depth))
}

/// Simulate every pattern of length `depth` with the given transition rule.
pub fn enumerate_with(depth: usize, step: StepFn, weights: &ReturnWeights) -> Result<Enumeration> {
    if !(1..=MAX_ENUMERATION_DEPTH).contains(&depth) {
        return Err(SpgError::OutOfRange {
            what: "enumeration depth",
            index: depth,
            bound: MAX_ENUMERATION_DEPTH + 1,
        });
    }
    let mut records = Vec::with_capacity(1 << depth);
    for code in 0..(1u32 << depth) {
        // most significant bit is depth 0, so patterns come out in lexicographic order
        let bits: Vec<bool> = (0..depth).map(|k| code >> (depth - 1 - k) & 1 == 1).collect();
        let mut trace = vec![ObservedState::CONTINUE];
        for &b in &bits {
            trace.push(step(*trace.last().expect("non-empty"), b));
        }
        let o_trace: Vec<i8> = trace.iter().map(|o| o.value()).collect();
        let rewards: Vec<u8> = trace.iter().map(|&o| state_reward(o)).collect();
        let masks: Vec<u8> = mask_series(std::slice::from_ref(&bits), 1, depth)?
            .unit(0)
            .into_iter()
            .map(u8::from)
            .collect();
        let return_weighted = padded_return(&rewards, Some(weights))?;
        let return_unweighted = padded_return(&rewards, None)?;

        let len = depth + 1;
        let actions_equal = len <= 2 || bits[..=len - 3].windows(2).all(|w| w[0] == w[1]);
        let eq10_member = actions_equal && o_trace[len - 1] >= 0;
        let resurrection = o_trace.windows(2).any(|w| w[0] == -1 && w[1] == 0);
        let mask_reward_divergences = masks
            .iter()
            .zip(&rewards)
            .enumerate()
            .filter(|(_, (m, r))| m != r)
            .map(|(t, _)| t)
            .collect();

        records.push(PatternRecord {
            depth,
            pattern: bits.iter().map(|&b| u8::from(b)).collect(),
            o_trace,
            rewards,
            masks,
            return_weighted,
            return_unweighted,
            nonzero_return: return_unweighted != 0.0,
            eq10_member,
            resurrection,
            mask_reward_divergences,
        });
    }
    Ok(Enumeration { depth, records })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent simulation written out case by case.
    fn brute_force_nonzero(depth: usize) -> Vec<Vec<u8>> {
        let mut out = Vec::new();
        for code in 0..(1u32 << depth) {
            let pattern: Vec<u8> = (0..depth).map(|k| (code >> (depth - 1 - k) & 1) as u8).collect();
            let mut o: i32 = 1;
            let mut r = vec![1u8];
            for &a in &pattern {
                o = match (o, a) {
                    (1, 1) => 1,
                    (1, 0) => 0,
                    (0, _) => -1,
                    (-1, 1) => -1,
                    (-1, 0) => 0,
                    _ => unreachable!(),
                };
                r.push(u8::from(o >= 0));
            }
            let sum: u32 = r.iter().map(|&x| u32::from(x)).sum();
            if sum * u32::from(*r.last().unwrap()) != 0 {
                out.push(pattern);
            }
        }
        out
    }

    #[test]
    fn truth_table_matches() {
        assert_eq!(truth_table(step_observed), EXPECTED_TRUTH_TABLE);
    }

    #[test]
    fn depth_two() {
        let e = enumerate_nonzero_returns(2).unwrap();
        assert_eq!(e.nonzero_patterns(), vec![vec![1, 0], vec![1, 1]]);
        assert_eq!(e.zero_patterns(), vec![vec![0, 0], vec![0, 1]]);
        assert!(e.identity_holds());
        assert!(e.divergences().contains(&(vec![1, 0], 2)));
    }

    #[test]
    fn depth_one() {
        let e = enumerate_nonzero_returns(1).unwrap();
        assert_eq!(e.nonzero_patterns(), vec![vec![0], vec![1]]);
        assert!(e.identity_holds());
    }

    #[test]
    fn matches_brute_force_up_to_eight() {
        for t in 1..=8 {
            let e = enumerate_nonzero_returns(t).unwrap();
            assert_eq!(e.nonzero_patterns(), brute_force_nonzero(t), "T={t}");
            assert!(e.identity_holds_without_resurrection(), "T={t}");
            assert!(e.mask_bounds_reward() && e.masks_monotone());
            assert!(e.returns_annihilate() && e.padded() && e.closed());
        }
    }

    #[test]
    fn resurrection_breaks_full_identity_from_three() {
        let e = enumerate_nonzero_returns(3).unwrap();
        let bad: Vec<Vec<u8>> = e.mismatches().iter().map(|r| r.pattern.clone()).collect();
        assert_eq!(bad, vec![vec![0, 1, 0]]);
        assert!(e.records.iter().find(|r| r.pattern == [0, 1, 0]).unwrap().resurrection);
    }

    #[test]
    fn depth_range() {
        assert!(enumerate_nonzero_returns(0).is_err());
        assert!(enumerate_nonzero_returns(9).is_err());
    }
}
