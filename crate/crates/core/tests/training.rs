//! End-to-end properties of the training loop on small synthetic tasks.

use spg::autodiff::{Mode, RngStream, Tape, Tensor};
use spg::cli::verify::{surrogate_gradcheck, surrogate_toy, GRAD_TOL};
use spg::tasks::{baseline_finetune, BatchInput, Split, SplitCounts, TaskData, TaskKind, TaskSpec};
use spg::trainer::{
    evaluate, objective, retrain, Checkpoint, LrSchedule, Phase, RunMetrics, StepStats, TrainConfig, Trainer,
};
use spg::trp::{SpgModel, TrpConfig};

fn small_blobs(seed: u64, train: usize) -> (TaskSpec, TaskData) {
    let mut spec = TaskSpec::blobs_preset(seed);
    spec.counts = SplitCounts {
        train,
        val: 150,
        test: 600,
    };
    let data = spec.generate_all().unwrap();
    (spec, data)
}

#[test]
fn surrogate_gradient_matches_finite_differences() {
    for seed in 0..4 {
        let r = surrogate_gradcheck(seed).unwrap();
        assert!(r.passes(GRAD_TOL), "seed {seed}: {}", r.max_rel_error);
    }
}

#[test]
fn masked_units_leave_later_modules_without_gradient() {
    let (model, input, targets, cfg) = surrogate_toy(11).unwrap();
    let BatchInput::Dense(x) = &input else { unreachable!() };
    let width = x.shape()[1];
    let mut seen_masked = false;
    for (i, &target) in targets.iter().enumerate() {
        let row = Tensor::new(vec![1, width], x.data()[i * width..(i + 1) * width].to_vec()).unwrap();
        let mut tape = Tape::new();
        let mut rng = RngStream::new(3, 9);
        let outs = model.forward(&mut tape, &BatchInput::Dense(row), &mut rng, Mode::Train).unwrap();
        let mut stats = StepStats::default();
        let loss = objective(&mut tape, &outs, &[target], 3, &cfg, &mut stats).unwrap();
        // first depth whose mask is zero for this unit
        let first_masked = stats.survivors.iter().position(|&s| s == 0);
        let grads = tape.backward(loss).unwrap();
        let mut store = model.store().clone();
        grads.write_to(&tape, &mut store);
        if let Some(k) = first_masked {
            seen_masked = true;
            for (name, t) in store.iter() {
                let module: Option<usize> = name
                    .strip_prefix("trp.main.")
                    .and_then(|rest| rest.split('.').next())
                    .and_then(|d| d.parse().ok());
                if module.is_some_and(|m| m >= k) {
                    let g = t.grad.as_ref().unwrap();
                    assert!(g.iter().all(|&v| v == 0.0), "unit {i} module {name}");
                }
            }
        }
    }
    assert!(seen_masked, "toy batch should contain a unit that fails early");
}

#[test]
fn degenerate_chain_matches_cross_entropy_for_100_steps() {
    let (spec, data) = small_blobs(5, 400);
    let arch = spec.reference_arch();
    let plain_cfg = TrainConfig::baseline("blobs", 5);
    let mut spg_cfg = plain_cfg.clone();
    spg_cfg.trp = Some(TrpConfig::empty(arch.width(), arch.classes));

    let mut plain = Trainer::new(SpgModel::new(arch.clone(), 5).unwrap(), plain_cfg).unwrap();
    let mut attached = SpgModel::new(arch, 5).unwrap();
    attached.attach(TrpConfig::empty(spec.reference_arch().width(), 3), 5).unwrap();
    let mut spg = Trainer::new(attached, spg_cfg).unwrap();
    for step in 0..100 {
        plain.train_steps(&data.train, 1).unwrap();
        spg.train_steps(&data.train, 1).unwrap();
        assert!(plain.model().store().bit_eq(spg.model().store()), "diverged at step {step}");
    }
}

#[test]
fn cold_start_keeps_parameters_and_fills_moments() {
    let (spec, data) = small_blobs(2, 300);
    let base = baseline_finetune(&spec, &data, &TrainConfig::baseline("blobs", 2), "").unwrap();
    let arch = spec.reference_arch();
    let cfg = TrainConfig::hpo("blobs", arch.width(), arch.classes, 2).unwrap();
    let mut model = base.checkpoint.model().unwrap();
    model.attach(cfg.trp.clone().unwrap(), 2).unwrap();
    let entry = model.store().clone();
    let mut trainer = Trainer::new(model, cfg).unwrap();
    let mut metrics = RunMetrics::default();
    trainer.cold_start(&data, &mut metrics).unwrap();
    assert_eq!(trainer.progress().epoch, 3);
    assert!(trainer.model().store().bit_eq(&entry));
    let opt = trainer.optimizer();
    assert!(opt.first_moment.iter().flatten().any(|&m| m != 0.0));
    assert!(opt.second_moment.iter().flatten().any(|&m| m != 0.0));
    assert!(metrics.records.iter().all(|r| r.phase == Phase::ColdStart));
}

#[test]
fn strip_preserves_main_logits_after_training() {
    let (spec, data) = small_blobs(8, 300);
    let arch = spec.reference_arch();
    let mut cfg = TrainConfig::hpo("blobs", arch.width(), arch.classes, 8).unwrap();
    cfg.cold_start_epochs = 0;
    cfg.schedule = LrSchedule::Constant { lr: 1e-2 };
    let mut model = SpgModel::new(arch.clone(), 8).unwrap();
    model.attach(cfg.trp.clone().unwrap(), 8).unwrap();
    let mut trainer = Trainer::new(model, cfg).unwrap();
    trainer.train_steps(&data.train, 20).unwrap();
    let attached = trainer.model();
    assert!(
        attached.store().iter().any(|(n, t)| n.starts_with("trp.") && t.data().iter().any(|&v| v != 0.0)),
        "chain should have moved away from zero"
    );
    let stripped = attached.strip().unwrap();
    let mut rng = RngStream::new(1, 2);
    let x: Vec<f64> = (0..100 * arch.input_dim).map(|_| 2.0 * rng.normal()).collect();
    let input = BatchInput::Dense(Tensor::new(vec![100, arch.input_dim], x).unwrap());
    let full = attached.logits(&input).unwrap();
    let alone = stripped.logits(&input).unwrap();
    assert!(full[0][0].bit_eq(&alone[0][0]));
    assert!(attached.predict(&input).unwrap().bit_eq(&stripped.predict(&input).unwrap()));
}

#[test]
fn cold_start_only_retrain_reproduces_baseline() {
    let (spec, data) = small_blobs(3, 300);
    let base = baseline_finetune(&spec, &data, &TrainConfig::baseline("blobs", 3), "").unwrap();
    let arch = spec.reference_arch();
    let mut cfg = TrainConfig::hpo("blobs", arch.width(), arch.classes, 3).unwrap();
    cfg.epochs = cfg.cold_start_epochs;
    let out = retrain(&base.checkpoint, &data, &cfg, "").unwrap();
    assert_eq!(out.stripped_test, out.baseline_test);
    assert!(out.stripped.params.bit_eq(&base.checkpoint.params));

    // zero rate throughout
    let mut cfg = TrainConfig::hpo("blobs", arch.width(), arch.classes, 3).unwrap();
    cfg.schedule = LrSchedule::Constant { lr: 0.0 };
    let out = retrain(&base.checkpoint, &data, &cfg, "").unwrap();
    assert!(out.stripped.params.bit_eq(&base.checkpoint.params));
}

#[test]
fn incompatible_chain_rejected() {
    let (spec, data) = small_blobs(3, 60);
    let mut bcfg = TrainConfig::baseline("blobs", 3);
    bcfg.epochs = 1;
    let base = baseline_finetune(&spec, &data, &bcfg, "").unwrap();
    let cfg = TrainConfig::hpo("blobs", 17, 3, 3).unwrap();
    assert!(retrain(&base.checkpoint, &data, &cfg, "").is_err());
    let cfg = TrainConfig::hpo("blobs", 32, 5, 3).unwrap();
    assert!(retrain(&base.checkpoint, &data, &cfg, "").is_err());
}

#[test]
fn checkpoint_file_round_trip() {
    let (spec, data) = small_blobs(4, 100);
    let arch = spec.reference_arch();
    let mut cfg = TrainConfig::nas("blobs", arch.width(), arch.classes, 4).unwrap();
    cfg.cold_start_epochs = 0;
    let mut model = SpgModel::new(arch, 4).unwrap();
    model.attach(cfg.trp.clone().unwrap(), 4).unwrap();
    let mut trainer = Trainer::new(model, cfg).unwrap();
    trainer.train_steps(&data.train, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p1 = dir.path().join("a.ckpt");
    let p2 = dir.path().join("b.ckpt");
    trainer.checkpoint("echo").save(&p1).unwrap();
    Checkpoint::load(&p1).unwrap().save(&p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
}

#[test]
fn uniform_random_predictor_scores_one_over_k() {
    let spec = TaskSpec::blobs_preset(6);
    let test = spec.generate(Split::Test).unwrap();
    let k = test.classes as u64;
    let mut rng = RngStream::new(6, 77);
    let preds: Vec<usize> = (0..test.units()).map(|_| rng.below(k) as usize).collect();
    let acc = spg::trainer::accuracy(&preds, &test.targets);
    let p = 1.0 / k as f64;
    let sigma = (p * (1.0 - p) / test.units() as f64).sqrt();
    assert!((acc - p).abs() < 3.0 * sigma, "{acc}");
}

#[test]
fn baselines_beat_chance_on_every_task() {
    for spec in [
        TaskSpec::blobs_preset(1),
        TaskSpec::shapes_preset(1),
        TaskSpec::pattern_preset(1),
    ] {
        let data = spec.generate_all().unwrap();
        let cfg = TrainConfig::baseline_for(spec.kind(), 1);
        let out = baseline_finetune(&spec, &data, &cfg, "").unwrap();
        let chance = match spec.kind() {
            // majority class: background covers most pixels
            TaskKind::Segmentation => {
                let bg = data.test.targets.iter().filter(|&&c| c == 0).count();
                bg as f64 / data.test.units() as f64
            }
            _ => 1.0 / data.test.classes as f64,
        };
        assert!(out.test.accuracy > chance + 0.02, "{:?}: {} vs {chance}", spec.kind(), out.test.accuracy);
        if spec.kind() == TaskKind::Segmentation {
            assert!(out.test.mean_iou.unwrap() > 0.5);
        }
    }
}

#[test]
fn blobs_baseline_close_to_bayes() {
    let spec = TaskSpec::blobs_preset(0);
    let data = spec.generate_all().unwrap();
    let out = baseline_finetune(&spec, &data, &TrainConfig::baseline("blobs", 0), "").unwrap();
    let bayes = spg::tasks::bayes_accuracy(&spec).unwrap();
    assert!(out.test.accuracy > bayes - 0.02, "{} vs {bayes}", out.test.accuracy);
}

#[test]
fn pattern_clean_accuracy_sits_at_one_minus_q() {
    let spec = TaskSpec::pattern_preset(0);
    let data = spec.generate_all().unwrap();
    let out = baseline_finetune(&spec, &data, &TrainConfig::baseline_for(spec.kind(), 0), "").unwrap();
    let clean = data.test.clean.as_ref().unwrap().iter().filter(|&&c| c).count() as f64;
    let q = spec.noise;
    let sigma = (q * (1.0 - q) / clean).sqrt();
    let acc = out.test.clean_accuracy.unwrap();
    assert!((acc - (1.0 - q)).abs() < 3.0 * sigma, "{acc} vs {} ± {}", 1.0 - q, 3.0 * sigma);
}

#[test]
fn noiseless_pattern_is_learned_exactly() {
    let mut spec = TaskSpec::pattern_preset(2);
    spec.noise = 0.0;
    let data = spec.generate_all().unwrap();
    let out = baseline_finetune(&spec, &data, &TrainConfig::baseline_for(spec.kind(), 2), "").unwrap();
    assert_eq!(out.test.clean_accuracy, Some(1.0));
    assert_eq!(out.test.accuracy, 1.0);
}

#[test]
fn nearly_noiseless_blobs_are_separated() {
    let (mut spec, _) = small_blobs(9, 300);
    spec.noise = 0.05;
    let data = spec.generate_all().unwrap();
    let out = baseline_finetune(&spec, &data, &TrainConfig::baseline("blobs", 9), "").unwrap();
    assert_eq!(out.test.accuracy, 1.0);
}

#[test]
fn splits_share_no_samples() {
    for spec in [TaskSpec::blobs_preset(4), TaskSpec::shapes_preset(4)] {
        let data = spec.generate_all().unwrap();
        let rows = |split: Split| -> std::collections::HashSet<Vec<u64>> {
            let d = data.get(split);
            let width = d.features.len() / d.samples;
            d.features
                .chunks(width)
                .map(|c| c.iter().map(|v| v.to_bits()).collect())
                .collect()
        };
        let (a, b, c) = (rows(Split::Train), rows(Split::Val), rows(Split::Test));
        assert!(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c));
    }
}

#[test]
fn evaluation_uses_main_head_of_attached_model() {
    let (spec, data) = small_blobs(1, 100);
    let arch = spec.reference_arch();
    let model = SpgModel::new(arch.clone(), 1).unwrap();
    let mut attached = model.clone();
    attached.attach(TrpConfig::hpo(vec![0.5; 2], arch.width(), arch.classes).unwrap(), 1).unwrap();
    assert_eq!(evaluate(&model, &data.test).unwrap(), evaluate(&attached, &data.test).unwrap());
}
