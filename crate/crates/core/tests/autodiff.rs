mod common;

use advseg::autodiff::*;
use advseg::losses::{cross_entropy, cross_entropy_on_tape};
use advseg::rng;
use ndarray::Array2;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn random_relu_nets_pass_gradient_check(seed in any::<u64>()) {
        let rep = common::gradcheck_trial(seed);
        prop_assert!(rep.passed, "{:?}", rep);
        prop_assert!(rep.max_rel_error <= 1e-4);
    }

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..20, cols in 1usize..10, scale in 0.01f64..50.0, seed in any::<u64>()) {
        let logits = gaussian_mat(rows, cols, scale, &mut rng::seeded(seed));
        let p = softmax_rows(&logits);
        for row in p.rows() {
            prop_assert!((row.sum() - 1.0).abs() <= 1e-9);
            prop_assert!(row.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn frozen_layers_bit_identical_after_updates(steps in 1usize..6, seed in any::<u64>()) {
        let mut model = SegModel::new(FeatureRecipe::default(), &[8, 8], 3, seed);
        model.freeze_all_but_last(1);
        let before: Vec<ParamTensor> = model.params().into_iter().cloned().collect();
        let feats = common::random_feats(6, seed ^ 1);
        let labels = vec![0, 1, 2, 0, 1, 2];
        let mut adam = AdamState::default();
        for _ in 0..steps {
            let mut tape = Tape::new();
            let rec = model.record(&mut tape, &feats, true, false).unwrap();
            let loss = cross_entropy_on_tape(&mut tape, rec.logits, &labels, None).unwrap();
            let grads = tape.backward(loss).unwrap();
            let g = model.param_grads(&rec, &grads);
            adam_step(&mut model, &g, &mut adam, &AdamHyper { lr: 0.05, ..Default::default() }).unwrap();
        }
        let after = model.params();
        for t in 0..4 {
            prop_assert_eq!(&before[t].data, &after[t].data);
        }
        prop_assert_ne!(&before[4].data, &after[4].data);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact(seed in any::<u64>(), hidden in prop::collection::vec(1usize..12, 0..3), c in 2usize..9) {
        let model = SegModel::new(FeatureRecipe::default(), &hidden, c, seed);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        model.save(&path).unwrap();
        let back = SegModel::load(&path).unwrap();
        prop_assert_eq!(&back, &model);
        let bits = |m: &SegModel| -> Vec<u32> { m.params().iter().flat_map(|p| p.data.iter().map(|v| v.to_bits())).collect() };
        prop_assert_eq!(bits(&back), bits(&model));
    }
}

#[test]
fn cross_entropy_of_delta_prediction_is_zero() {
    let mut logits = Array2::from_elem((3, 4), -1e4);
    let labels = [2u32, 0, 3];
    for (i, &l) in labels.iter().enumerate() {
        logits[[i, l as usize]] = 1e4;
    }
    assert_eq!(cross_entropy(&logits, &labels).unwrap(), 0.0);
}

#[test]
fn hundred_random_nets_within_tolerance() {
    let worst = (0..100)
        .map(|s| common::gradcheck_trial(s).max_rel_error)
        .fold(0.0, f64::max);
    assert!(worst <= 1e-4, "worst relative error {worst}");
}
