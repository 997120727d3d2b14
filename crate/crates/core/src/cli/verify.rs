//! Property suites run by `spg verify`.
//!
//! Each suite is an exact or tolerance-bounded check that needs no training
//! data. The transition rule is a parameter so that a deliberately broken
//! rule can be shown to fail.

use std::fmt::Write as _;
use std::time::Instant;

use crate::autodiff::gradcheck::{check_params, check_primitive, primitive_cases, GradCheckReport};
use crate::autodiff::{dropout, Mode, RngStream, Tape, Tensor};
use crate::error::Result;
use crate::tasks::{BatchInput, TaskKind};
use crate::trainer::{objective, StepStats, TrainConfig};
use crate::trajectory::{
    effective_batch_size, enumerate_with, truth_table, PatternRecord, ReturnWeights, StepFn,
    EXPECTED_TRUTH_TABLE, MAX_ENUMERATION_DEPTH,
};
use crate::trp::{added_param_count, cumulative_rate, ArchSpec, SpgModel, TrpConfig};

/// Tolerance for every gradient comparison.
pub const GRAD_TOL: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct VerifyReport {
    pub max_t: usize,
    pub suites: Vec<SuiteResult>,
    /// every simulated pattern for `T = 1..=max_t`
    pub records: Vec<PatternRecord>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(|s| s.passed)
    }

    pub fn table(&self) -> String {
        let mut out = format!("{:<22} {:<6} {:>9}  detail\n", "suite", "result", "seconds");
        for s in &self.suites {
            let _ = writeln!(
                out,
                "{:<22} {:<6} {:>9.3}  {}",
                s.name,
                if s.passed { "PASS" } else { "FAIL" },
                s.seconds,
                s.detail
            );
        }
        out
    }

    /// Every depth at which the positional mask and the state reward differ.
    pub fn divergence_report(&self) -> String {
        let mut out = String::from("mask/reward divergences (T, pattern, t, mask, reward)\n");
        for r in &self.records {
            for &t in &r.mask_reward_divergences {
                let pattern: String = r.pattern.iter().map(|b| char::from(b'0' + b)).collect();
                let _ = writeln!(out, "{} {} {} {} {}", r.depth, pattern, t, r.masks[t], r.rewards[t]);
            }
        }
        out
    }

    pub fn records_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }
}

fn timed(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> SuiteResult {
    let start = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    SuiteResult {
        name,
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

pub fn check_truth_table(step: StepFn) -> (bool, String) {
    let got = truth_table(step);
    (got == EXPECTED_TRUTH_TABLE, format!("{got:?}"))
}

/// Exhaustive enumeration for `T = 1..=max_t`.
///
/// Passes when the non-zero-return set matches the action characterisation
/// on every pattern whose trace never climbs back from -1, the masks are
/// monotone and bounded by the rewards, and the known `T = 2` divergence at
/// pattern (1,0) shows up. Patterns that do climb back are counted in the
/// detail; they are where the characterisation is too narrow.
pub fn check_enumeration(max_t: usize, step: StepFn) -> Result<(bool, String, Vec<PatternRecord>)> {
    let mut ok = true;
    let mut records = Vec::new();
    let mut strict = Vec::new();
    let mut resurrected = 0;
    for t in 1..=max_t {
        let e = enumerate_with(t, step, &ReturnWeights::halving(0.4, t))?;
        ok &= e.identity_holds_without_resurrection()
            && e.mask_bounds_reward()
            && e.masks_monotone()
            && e.returns_annihilate()
            && e.padded()
            && e.closed();
        if t == 2 {
            ok &= e.divergences().contains(&(vec![1, 0], 2));
        }
        if e.identity_holds() {
            strict.push(t);
        }
        resurrected += e.mismatches().len();
        records.extend(e.records);
    }
    let detail = format!(
        "{} patterns; strict identity at T={:?}; {} mismatches, all after a -1 -> 0 climb",
        records.len(),
        strict,
        resurrected
    );
    Ok((ok, detail, records))
}

/// A two-module dropout chain on a small classifier with every parameter
/// drawn at random, so no gradient is trivially zero.
pub fn surrogate_toy(seed: u64) -> Result<(SpgModel, BatchInput, Vec<usize>, TrainConfig)> {
    let arch = ArchSpec {
        kind: TaskKind::Classification,
        input_dim: 4,
        vocab: 0,
        embed_dim: 0,
        hidden: vec![5],
        classes: 3,
        aux_from: None,
    };
    let mut model = SpgModel::new(arch, seed)?;
    let trp = TrpConfig::hpo(vec![0.2, 0.3], 5, 3)?;
    model.attach(trp.clone(), seed)?;
    let mut rng = RngStream::new(seed, 0x70);
    let ids: Vec<_> = model.store().ids().collect();
    for id in ids {
        for v in model.store_mut().get_mut(id).data_mut() {
            *v = rng.uniform(-0.8, 0.8);
        }
    }
    let rows = 6;
    let x: Vec<f64> = (0..rows * 4).map(|_| rng.uniform(-1.5, 1.5)).collect();
    let targets: Vec<usize> = (0..rows).map(|i| i % 3).collect();
    let mut cfg = TrainConfig::hpo("blobs", 5, 3, seed)?;
    cfg.trp = Some(trp);
    cfg.lambdas = vec![0.4, 0.2];
    Ok((model, BatchInput::Dense(Tensor::new(vec![rows, 4], x)?), targets, cfg))
}

/// Finite-difference check of the surrogate loss of [`surrogate_toy`]
/// against every parameter, dropout masks held fixed by reseeding.
pub fn surrogate_gradcheck(seed: u64) -> Result<GradCheckReport> {
    let (model, input, targets, cfg) = surrogate_toy(seed)?;
    let arch = model.arch().clone();
    let trp = model.trp().cloned();
    let ids: Vec<_> = model.store().ids().collect();
    check_params(model.store(), &ids, "surrogate", |store| {
        let m = SpgModel::with_params(arch.clone(), trp.clone(), store.clone())?;
        let mut tape = Tape::new();
        let mut rng = RngStream::new(seed, 0x71);
        let outs = m.forward(&mut tape, &input, &mut rng, Mode::Train)?;
        let loss = objective(&mut tape, &outs, &targets, arch.classes, &cfg, &mut StepStats::default())?;
        Ok((tape, loss))
    })
}

pub fn check_gradients(seed: u64) -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut failing = Vec::new();
    let mut reports: Vec<GradCheckReport> = primitive_cases()
        .iter()
        .map(|(p, shapes)| check_primitive(p, shapes, seed))
        .collect::<Result<_>>()?;
    reports.push(surrogate_gradcheck(seed)?);
    for r in &reports {
        worst = worst.max(r.max_rel_error);
        checked += r.checked;
        if !r.passes(GRAD_TOL) {
            failing.push(r.label.clone());
        }
    }
    Ok((
        failing.is_empty(),
        format!("{checked} partials, max rel err {worst:.2e}, failing {failing:?}"),
    ))
}

/// Freshly attached chains of both variants leave every depth's eval
/// logits bit-identical to `π_0`.
pub fn check_zero_init(samples: usize, seed: u64) -> Result<(bool, String)> {
    let arch = ArchSpec {
        kind: TaskKind::Classification,
        input_dim: 6,
        vocab: 0,
        embed_dim: 0,
        hidden: vec![8, 8],
        classes: 4,
        aux_from: None,
    };
    let mut rng = RngStream::new(seed, 0x72);
    let x: Vec<f64> = (0..samples * 6).map(|_| 3.0 * rng.normal()).collect();
    let input = BatchInput::Dense(Tensor::new(vec![samples, 6], x)?);
    let mut ok = true;
    for cfg in [
        TrpConfig::hpo(vec![0.2, 0.2, 0.2], 8, 4)?,
        TrpConfig::nas(3, 2, 8, 4)?,
    ] {
        let mut model = SpgModel::new(arch.clone(), seed)?;
        model.attach(cfg, seed + 1)?;
        for stream in model.logits(&input)? {
            ok &= stream.iter().all(|l| l.bit_eq(&stream[0]));
        }
    }
    Ok((ok, format!("{samples} inputs, dropout and depth chains, T=3")))
}

/// Empirical keep rate of three chained dropout layers at 0.2 against
/// `0.8^3`, plus the closed-form cumulative rates.
pub fn check_cumulative_dropout(elements: usize, seed: u64) -> Result<(bool, String)> {
    let mut rng = RngStream::new(seed, 0x73);
    let mut x = Tensor::new(vec![elements], vec![1.0; elements])?;
    for _ in 0..3 {
        x = dropout(&x, 0.2, &mut rng, Mode::Train)?;
    }
    let kept = x.data().iter().filter(|&&v| v != 0.0).count() as f64 / elements as f64;
    let p = 0.8f64.powi(3);
    let sigma = (p * (1.0 - p) / elements as f64).sqrt();
    let cfg = TrpConfig::hpo(vec![0.2; 3], 1, 2)?;
    let c2 = cumulative_rate(&cfg, 2)?;
    let c3 = cumulative_rate(&cfg, 3)?;
    let ok = (kept - p).abs() <= 3.0 * sigma && c2 == 0.36 && c3 == 0.488;
    Ok((
        ok,
        format!("keep {kept:.5} vs {p:.3} (3σ = {:.5}); rates {c2} {c3}", 3.0 * sigma),
    ))
}

pub fn check_param_counts() -> Result<(bool, String)> {
    let wide = added_param_count(&TrpConfig::hpo(vec![0.2; 3], 768, 10)?).temporary;
    let arch = ArchSpec {
        kind: TaskKind::Segmentation,
        input_dim: 9,
        vocab: 0,
        embed_dim: 0,
        hidden: vec![6, 7],
        classes: 3,
        aux_from: Some(0),
    };
    let mut ok = wide == 1_771_776;
    for cfg in [TrpConfig::hpo(vec![0.1, 0.2], 7, 3)?, TrpConfig::nas(2, 2, 7, 3)?] {
        let mut model = SpgModel::new(arch.clone(), 0)?;
        let base = model.store().scalar_count();
        let planned = model.planned_budget(&cfg);
        model.attach(cfg, 1)?;
        ok &= model.budget() == planned && model.store().scalar_count() == base + planned.temporary;
        ok &= model.strip()?.store().scalar_count() == base;
    }
    Ok((ok, format!("D=768 T=3 adds {wide}; attach then strip restores the base count")))
}

pub fn check_batch_sizes() -> Result<(bool, String)> {
    let got = [
        effective_batch_size(TaskKind::Classification, &[3])?,
        effective_batch_size(TaskKind::Segmentation, &[1, 180, 360])?,
        effective_batch_size(TaskKind::LanguageModeling, &[2, 3])?,
    ];
    Ok((got == [3, 129_600, 6], format!("{got:?}")))
}

#[derive(Clone, Copy, Debug)]
pub struct VerifyOptions {
    pub max_t: usize,
    pub seed: u64,
    pub step: StepFn,
}

impl VerifyOptions {
    pub fn new(max_t: usize) -> Self {
        VerifyOptions {
            max_t,
            seed: 0,
            step: crate::trajectory::step_observed,
        }
    }
}

/// Run every suite. Fails only on an out-of-range depth.
pub fn run_verify(opts: &VerifyOptions) -> Result<VerifyReport> {
    if !(1..=MAX_ENUMERATION_DEPTH).contains(&opts.max_t) {
        return Err(crate::SpgError::OutOfRange {
            what: "--max-t",
            index: opts.max_t,
            bound: MAX_ENUMERATION_DEPTH + 1,
        });
    }
    let mut records = Vec::new();
    let suites = vec![
        timed("truth-table", || Ok(check_truth_table(opts.step))),
        timed("enumeration", || {
            let (ok, detail, recs) = check_enumeration(opts.max_t, opts.step)?;
            records = recs;
            Ok((ok, detail))
        }),
        timed("gradients", || check_gradients(opts.seed)),
        timed("zero-init-identity", || check_zero_init(100, opts.seed)),
        timed("cumulative-dropout", || check_cumulative_dropout(100_000, opts.seed)),
        timed("param-count", check_param_counts),
        timed("effective-batch-size", check_batch_sizes),
    ];
    Ok(VerifyReport {
        max_t: opts.max_t,
        suites,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::ObservedState;

    fn never_terminates(o: ObservedState, _correct: bool) -> ObservedState {
        o
    }

    #[test]
    fn clean_build_passes() {
        let r = run_verify(&VerifyOptions::new(3)).unwrap();
        assert!(r.passed(), "{}", r.table());
        assert_eq!(r.records.len(), 2 + 4 + 8);
        assert!(r.divergence_report().contains("\n2 10 2 0 1\n"));
    }

    #[test]
    fn broken_rule_fails_truth_table() {
        let opts = VerifyOptions {
            step: never_terminates,
            ..VerifyOptions::new(2)
        };
        let r = run_verify(&opts).unwrap();
        assert!(!r.passed());
        assert!(!r.suites[0].passed);
    }

    #[test]
    fn depth_out_of_range() {
        assert!(run_verify(&VerifyOptions::new(0)).is_err());
        assert!(run_verify(&VerifyOptions::new(9)).is_err());
    }
}
