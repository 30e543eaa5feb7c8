use std::collections::BTreeSet;

use advseg::attack::*;
use advseg::autodiff::SegModel;
use advseg::cloud::io::{list_scans, ScanEntry};
use advseg::cloud::{class_histogram, synth_scene, viewpoint_distances, LabeledCloud, SceneSpec};
use advseg::eval::pretrain;
use advseg::losses::per_point_cross_entropy;
use advseg::train::{Objective, TrainConfig};
use proptest::prelude::*;

fn scans(n: usize, points: usize, seed: u64) -> Vec<LabeledCloud> {
    (0..n)
        .map(|i| synth_scene(&SceneSpec::source(points, seed * 100 + i as u64)).unwrap())
        .collect()
}

fn toy_model(seed: u64) -> SegModel {
    let cfg = TrainConfig {
        epochs: 4,
        ..TrainConfig::default()
    };
    pretrain(&scans(2, 4000, seed), 8, &cfg, Objective::CrossEntropy, seed).unwrap()
}

fn target_mean_ce(model: &SegModel, cloud: &LabeledCloud, targets: &BTreeSet<u32>) -> f64 {
    let ce = per_point_cross_entropy(&model.forward_cloud(cloud).unwrap(), &cloud.labels).unwrap();
    let rows: Vec<usize> = (0..cloud.len()).filter(|&j| targets.contains(&cloud.labels[j])).collect();
    rows.iter().map(|&j| ce[j]).sum::<f64>() / rows.len() as f64
}

proptest! {
    #[test]
    fn gamma_is_monotone(mut d in prop::collection::vec(0.0f64..100.0, 2..50), near in 0.0f64..20.0, span in 0.1f64..60.0) {
        let cfg = AttackConfig { d_near: near, d_far: near + span, ..AttackConfig::default() };
        d.sort_by(f64::total_cmp);
        let g = distance_gamma(&d, &cfg);
        for w in g.windows(2) {
            prop_assert!(w[0] <= w[1]);
        }
        for v in g {
            prop_assert!((cfg.gamma_min..=cfg.gamma_max).contains(&v));
        }
    }
}

#[test]
fn budget_locality_and_flip_soundness() {
    let model = toy_model(1);
    let cfg = AttackConfig {
        steps: 4,
        ..AttackConfig::with_budget(0.2, 4)
    };
    for (i, cloud) in scans(4, 3000, 7).iter().enumerate() {
        let stats = class_histogram(&cloud.labels, 8).unwrap();
        let targets = select_classes(&stats, 0.5, i as u64);
        let adv = pgd_attack(&model, cloud, &targets, &cfg).unwrap();
        let gamma = distance_gamma(&viewpoint_distances(cloud), &cfg);
        assert_eq!(adv.labels, cloud.labels);
        for j in 0..cloud.len() {
            if targets.contains(&cloud.labels[j]) {
                for a in 0..3 {
                    let d = (adv.points[j][a] - cloud.points[j][a]).abs();
                    assert!(d <= gamma[j] * cfg.base_epsilon + 1e-9, "scan {i} point {j}");
                }
            } else {
                assert_eq!(adv.points[j].map(f64::to_bits), cloud.points[j].map(f64::to_bits));
            }
        }
        let (labels, mask) = corrupt_labels(&model, cloud, &targets, 0.5, i as u64).unwrap();
        for j in 0..cloud.len() {
            if mask[j] {
                assert_ne!(labels[j], cloud.labels[j]);
                assert!(targets.contains(&cloud.labels[j]));
            } else {
                assert_eq!(labels[j], cloud.labels[j]);
            }
        }
    }
}

#[test]
fn pgd_raises_target_class_loss() {
    let model = toy_model(2);
    let cloud = synth_scene(&SceneSpec::source(4000, 99)).unwrap();
    let stats = class_histogram(&cloud.labels, 8).unwrap();
    let targets: BTreeSet<u32> = stats.present().into_iter().map(|c| c as u32).collect();
    let adv = pgd_attack(&model, &cloud, &targets, &AttackConfig::default()).unwrap();
    assert!(target_mean_ce(&model, &adv, &targets) > target_mean_ce(&model, &cloud, &targets));
}

#[test]
fn manifest_flip_counts_match_label_diff() {
    let dir = tempfile::tempdir().unwrap();
    let (src, dst) = (dir.path().join("clean"), dir.path().join("adv"));
    for (i, c) in scans(5, 2000, 3).iter().enumerate() {
        ScanEntry::new(&src, "00", &format!("{i:06}")).save(c).unwrap();
    }
    let model = toy_model(3);
    let cfg = AttackConfig {
        seed: 5,
        ..AttackConfig::with_budget(0.2, 3)
    };
    let manifest = contaminate_dataset(&src, &dst, &model, &cfg).unwrap();
    let parsed = ContaminationManifest::load(&dst.join("manifest.tsv")).unwrap();
    assert_eq!(parsed, manifest);
    let mut total = 0;
    for (entry, row) in list_scans(&src).unwrap().iter().zip(&manifest.rows) {
        assert!(row.skipped.is_none());
        let before = entry.load().unwrap();
        let after = entry.rebase(&dst).load().unwrap();
        for &(c, n) in &row.flips {
            let diff = (0..before.len())
                .filter(|&j| before.labels[j] == c && after.labels[j] != c)
                .count();
            assert_eq!(diff, n, "scan {} class {c}", row.id);
        }
        let any_diff = (0..before.len()).filter(|&j| before.labels[j] != after.labels[j]).count();
        assert_eq!(any_diff, row.flips.iter().map(|f| f.1).sum::<usize>());
        total += any_diff;
    }
    assert_eq!(total, manifest.total_flips());
}
