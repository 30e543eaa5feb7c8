mod common;

use advseg::cloud::class_histogram;
use advseg::eval::*;
use proptest::prelude::*;

#[test]
fn iou_equals_set_oracle_on_random_matrices() {
    for seed in 0..1000 {
        let c = 2 + (seed % 9) as usize;
        let (pred, truth, cm) = common::random_labels(seed, c);
        let want = common::set_iou(&pred, &truth, c);
        assert_eq!(iou_per_class(&cm), want, "seed {seed}");
        let defined: Vec<f64> = want.iter().flatten().copied().collect();
        let m = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
        assert_eq!(miou(&cm), m, "seed {seed}");
    }
}

proptest! {
    #[test]
    fn confusion_equals_brute_force_tally(pairs in prop::collection::vec((0u32..6, 0u32..6), 0..400)) {
        let (pred, truth): (Vec<u32>, Vec<u32>) = pairs.iter().copied().unzip();
        let cm = confusion(&pred, &truth, 6).unwrap();
        for t in 0..6 {
            for p in 0..6 {
                let n = pairs.iter().filter(|&&(pp, tt)| pp == p && tt == t).count() as u64;
                prop_assert_eq!(cm.get(t as usize, p as usize), n);
            }
        }
        prop_assert_eq!(cm.total(), pairs.len() as u64);
        let tally = class_histogram(&truth, 6).unwrap();
        prop_assert_eq!(cm.truth_counts(), tally.counts);
    }

    #[test]
    fn iou_is_permutation_equivariant(seed in any::<u64>(), shift in 1u32..6) {
        let c = 6;
        let (pred, truth, cm) = common::random_labels(seed, c);
        let perm = |v: &[u32]| -> Vec<u32> { v.iter().map(|&x| (x + shift) % c as u32).collect() };
        let cm2 = confusion(&perm(&pred), &perm(&truth), c).unwrap();
        let (a, b) = (iou_per_class(&cm), iou_per_class(&cm2));
        for k in 0..c {
            prop_assert_eq!(a[k], b[(k + shift as usize) % c]);
        }
        prop_assert!((miou(&cm).unwrap_or(0.0) - miou(&cm2).unwrap_or(0.0)).abs() <= 1e-12);
    }

    #[test]
    fn masked_confusion_counts_only_kept_points(pairs in prop::collection::vec((0u32..4, 0u32..4, any::<bool>()), 0..200)) {
        let pred: Vec<u32> = pairs.iter().map(|p| p.0).collect();
        let truth: Vec<u32> = pairs.iter().map(|p| p.1).collect();
        let mask: Vec<bool> = pairs.iter().map(|p| p.2).collect();
        let cm = confusion_masked(&pred, &truth, Some(&mask), 4).unwrap();
        let kept: Vec<(u32, u32)> = pairs.iter().filter(|p| p.2).map(|p| (p.0, p.1)).collect();
        let (kp, kt): (Vec<u32>, Vec<u32>) = kept.into_iter().unzip();
        prop_assert_eq!(cm, confusion(&kp, &kt, 4).unwrap());
    }

    #[test]
    fn shift_report_csv_round_trips(
        before in prop::collection::vec(0u64..1000, 1..10),
        scale in prop::collection::vec(0.0f64..2.0, 10),
    ) {
        let c = before.len();
        let after: Vec<u64> = before.iter().zip(&scale).map(|(&b, &s)| (b as f64 * s) as u64 + 1).collect();
        let expand = |counts: &[u64]| -> Vec<u32> {
            counts.iter().enumerate().flat_map(|(k, &n)| std::iter::repeat_n(k as u32, n as usize)).collect()
        };
        let (lb, la) = (expand(&before), expand(&after));
        prop_assume!(!lb.is_empty());
        let report = distribution_shift_report(&class_histogram(&lb, c).unwrap(), &class_histogram(&la, c).unwrap()).unwrap();
        let back = ShiftReport::parse_csv(&report.to_csv()).unwrap();
        prop_assert_eq!(&back, &report);
        for w in report.rows.windows(2) {
            prop_assert!(w[0].before >= w[1].before);
        }
        for r in &report.rows {
            prop_assert_eq!(r.delta, r.after - r.before);
        }
    }
}

#[test]
fn ignored_class_left_out_of_mean() {
    let cm = ConfusionMatrix::from_rows(&[vec![3, 1], vec![0, 4]]).unwrap();
    let ious = iou_per_class(&cm);
    assert_eq!(ious, [Some(0.75), Some(0.8)]);
    assert_eq!(miou_excluding(&cm, Some(0)), Some(0.8));
    assert_eq!(miou(&ConfusionMatrix::new(3)), None);
}
