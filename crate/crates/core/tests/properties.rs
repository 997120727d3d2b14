//! Randomised invariants.

use proptest::prelude::*;

use spg::autodiff::{RngStream, Tensor};
use spg::tasks::{BatchInput, Dataset, TaskKind, TaskSpec};
use spg::trainer::Checkpoint;
use spg::trajectory::{
    mask_series, padded_return, state_reward, step_length, step_observed, EpisodeBatch, ObservedState, ReturnWeights,
};
use spg::trp::{added_param_count, cumulative_rate, ArchSpec, SpgModel, TrpConfig};

fn patterns(max_units: usize, max_t: usize) -> impl Strategy<Value = (usize, Vec<Vec<bool>>)> {
    (1..=max_t).prop_flat_map(move |t| {
        (Just(t), prop::collection::vec(prop::collection::vec(any::<bool>(), t), 1..=max_units))
    })
}

fn small_arch() -> impl Strategy<Value = ArchSpec> {
    (1usize..6, prop::collection::vec(1usize..7, 1..3), 2usize..5).prop_map(|(input, hidden, classes)| ArchSpec {
        kind: TaskKind::Classification,
        input_dim: input,
        vocab: 0,
        embed_dim: 0,
        hidden,
        classes,
        aux_from: None,
    })
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn masks_are_prefix_products((t, correct) in patterns(12, 8)) {
        let m = correct.len();
        let masks = mask_series(&correct, m, t).unwrap();
        prop_assert!(masks.at(0).iter().all(|&b| b));
        for (i, row) in correct.iter().enumerate() {
            let unit = masks.unit(i);
            for (d, &kept) in unit.iter().enumerate() {
                prop_assert_eq!(kept, row[..d].iter().all(|&c| c));
            }
            prop_assert!(unit.windows(2).all(|w| w[1] <= w[0]));
        }
        let s = masks.survival();
        prop_assert!(s.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn step_lengths_stay_in_range((t, correct) in patterns(12, 8)) {
        let m = correct.len();
        let masks = mask_series(&correct, m, t).unwrap();
        for (i, len) in masks.step_lengths().into_iter().enumerate() {
            prop_assert!((1..=t).contains(&len));
            prop_assert_eq!(len, step_length(&masks.unit(i), t));
        }
    }

    #[test]
    fn observed_states_stay_ternary(start in -1i8..=1, moves in prop::collection::vec(any::<bool>(), 0..20)) {
        let mut o = ObservedState::new(start).unwrap();
        for c in moves {
            o = step_observed(o, c);
            prop_assert!((-1..=1).contains(&o.value()));
        }
    }

    #[test]
    fn returns_vanish_after_a_dummy_state(rewards in prop::collection::vec(0u8..=1, 1..9)) {
        let w = ReturnWeights::halving(0.4, 8);
        let weighted = padded_return(&rewards, Some(&w)).unwrap();
        let plain = padded_return(&rewards, None).unwrap();
        if *rewards.last().unwrap() == 0 {
            prop_assert_eq!(weighted, 0.0);
            prop_assert_eq!(plain, 0.0);
        } else {
            prop_assert!(plain >= weighted && weighted >= f64::from(rewards[0]));
        }
    }

    #[test]
    fn episodes_agree_with_their_masks(
        preds in prop::collection::vec(prop::collection::vec(0usize..3, 4), 1..10),
    ) {
        let targets: Vec<usize> = (0..preds.len()).map(|i| i % 3).collect();
        let ep = EpisodeBatch::from_predictions(preds.clone(), &targets, None).unwrap();
        for i in 0..preds.len() {
            // a surviving unit has a non-negative state
            for (t, &alive) in ep.masks.unit(i).iter().enumerate() {
                if alive {
                    prop_assert_eq!(state_reward(ep.observed[i][t]), 1);
                }
            }
        }
    }

    #[test]
    fn cumulative_rate_grows_with_depth(rates in prop::collection::vec(0.0f64..0.95, 1..6)) {
        let cfg = TrpConfig::hpo(rates.clone(), 4, 2).unwrap();
        let mut prev = 0.0;
        let mut keep = 1.0;
        for t in 1..=rates.len() {
            let c = cumulative_rate(&cfg, t).unwrap();
            keep *= 1.0 - rates[t - 1];
            prop_assert!(c >= prev);
            prop_assert!((c - (1.0 - keep)).abs() < 1e-12);
            prev = c;
        }
    }

    #[test]
    fn parameter_budget_formula(t in 1usize..5, d in 1usize..40, blocks in 1usize..3) {
        let hpo = added_param_count(&TrpConfig::hpo(vec![0.1; t], d, 3).unwrap());
        prop_assert_eq!(hpo.temporary, t * (d * d + d));
        let nas = added_param_count(&TrpConfig::nas(t, blocks, d, 3).unwrap());
        prop_assert_eq!(nas.temporary, t * blocks * 2 * (d * d + d));
    }

    #[test]
    fn checkpoint_bytes_round_trip(arch in small_arch(), seed in any::<u64>(), depth in 0usize..3, nas in any::<bool>()) {
        let mut model = SpgModel::new(arch.clone(), seed).unwrap();
        if depth > 0 {
            let cfg = if nas {
                TrpConfig::nas(depth, 1, arch.width(), arch.classes).unwrap()
            } else {
                TrpConfig::hpo(vec![0.3; depth], arch.width(), arch.classes).unwrap()
            };
            model.attach(cfg, seed).unwrap();
        }
        let bytes = Checkpoint::from_model(&model).to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        prop_assert!(back.model().unwrap().store().bit_eq(model.store()));
    }

    #[test]
    fn fresh_chains_do_not_change_predictions(arch in small_arch(), seed in any::<u64>(), depth in 1usize..4) {
        let mut rng = RngStream::new(seed, 1);
        let x: Vec<f64> = (0..8 * arch.input_dim).map(|_| 4.0 * rng.normal()).collect();
        let input = BatchInput::Dense(Tensor::new(vec![8, arch.input_dim], x).unwrap());
        for cfg in [
            TrpConfig::hpo(vec![0.4; depth], arch.width(), arch.classes).unwrap(),
            TrpConfig::nas(depth, 2, arch.width(), arch.classes).unwrap(),
        ] {
            let mut model = SpgModel::new(arch.clone(), seed).unwrap();
            model.attach(cfg, seed ^ 1).unwrap();
            let logits = model.logits(&input).unwrap();
            for l in &logits[0] {
                prop_assert!(l.bit_eq(&logits[0][0]));
            }
            let stripped = model.strip().unwrap();
            prop_assert_eq!(stripped.store().scalar_count(), stripped.base_param_count());
            prop_assert!(stripped.predict(&input).unwrap().bit_eq(&logits[0][0]));
        }
    }

    #[test]
    fn generated_datasets_are_reproducible(seed in any::<u64>()) {
        let mut spec = TaskSpec::pattern_preset(seed);
        spec.counts.train = 20;
        let a = spec.generate(spg::tasks::Split::Train).unwrap();
        let b = spec.generate(spg::tasks::Split::Train).unwrap();
        prop_assert_eq!(a.to_bytes(), b.to_bytes());
        prop_assert_eq!(Dataset::from_bytes(&a.to_bytes()).unwrap(), a);
    }
}
