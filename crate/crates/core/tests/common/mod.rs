#![allow(dead_code)]

use advseg::adaptation::{neighbor_lists, PseudoLabels, HnpuConfig};
use advseg::autodiff::{
    finite_diff_check, gaussian_mat, FeatureRecipe, GradCheckConfig, GradCheckReport, PointFeatures, SegModel, Tape,
    Var,
};
use advseg::bo::{BoState, Kernel};
use advseg::cloud::{Point3, SpatialIndex};
use advseg::eval::{confusion, ConfusionMatrix};
use advseg::losses::cross_entropy_on_tape;
use advseg::rng;
use rand::Rng;
use statrs::distribution::{ContinuousCDF, Normal};

pub fn random_feats(n: usize, seed: u64) -> PointFeatures {
    let mut r = rng::seeded(seed);
    PointFeatures {
        coords: gaussian_mat(n, 3, 1.0, &mut r),
        context: gaussian_mat(n, 5, 0.5, &mut r),
    }
}

/// Gradient check of a seeded random relu net under cross-entropy, with the
/// input redrawn until every hidden pre-activation clears the kink margin.
pub fn gradcheck_trial(seed: u64) -> GradCheckReport {
    let mut r = rng::indexed(seed, "gradcheck-net", 0);
    let depth = r.random_range(1..=2);
    let hidden: Vec<usize> = (0..depth).map(|_| r.random_range(4..=16)).collect();
    let classes = r.random_range(2..=6);
    let model = SegModel::new(FeatureRecipe::default(), &hidden, classes, seed);
    for attempt in 0..50 {
        let n = r.random_range(2..=8);
        let feats = random_feats(n, rng::indexed(seed, "gradcheck-input", attempt).random());
        let labels: Vec<u32> = (0..n).map(|_| r.random_range(0..classes as u32)).collect();
        let loss = move |t: &mut Tape, logits: Var| cross_entropy_on_tape(t, logits, &labels, None).unwrap();
        let cfg = GradCheckConfig {
            seed,
            ..Default::default()
        };
        let rep = finite_diff_check(&model, &feats, &loss, &cfg).unwrap();
        if rep.min_abs_preactivation > 1e-3 {
            return rep;
        }
    }
    panic!("no kink-free input found for seed {seed}");
}

/// IoU per class by set intersection over point indices.
pub fn set_iou(pred: &[u32], truth: &[u32], c: usize) -> Vec<Option<f64>> {
    use std::collections::BTreeSet;
    (0..c as u32)
        .map(|k| {
            let p: BTreeSet<usize> = (0..pred.len()).filter(|&i| pred[i] == k).collect();
            let t: BTreeSet<usize> = (0..truth.len()).filter(|&i| truth[i] == k).collect();
            let union = p.union(&t).count();
            (union > 0).then(|| p.intersection(&t).count() as f64 / union as f64)
        })
        .collect()
}

/// Random prediction/truth vectors and their confusion matrix.
pub fn random_labels(seed: u64, c: usize) -> (Vec<u32>, Vec<u32>, ConfusionMatrix) {
    let mut r = rng::indexed(seed, "metric-oracle", 0);
    let n = r.random_range(0..300);
    let used = r.random_range(1..=c as u32);
    let pred: Vec<u32> = (0..n).map(|_| r.random_range(0..used)).collect();
    let truth: Vec<u32> = (0..n).map(|_| r.random_range(0..used)).collect();
    let cm = confusion(&pred, &truth, c).unwrap();
    (pred, truth, cm)
}

pub fn bo_state(r: &mut rng::Rng) -> BoState {
    let mut s = BoState::new(Kernel {
        length_scale: r.random_range(0.05..0.6),
        signal_variance: r.random_range(0.2..3.0),
        noise_variance: 10f64.powf(r.random_range(-6.0..-2.0)),
    });
    for _ in 0..r.random_range(1..8) {
        s.observe(r.random_range(0.0..=1.0), r.random_range(-2.0..2.0)).unwrap();
    }
    s
}

/// Stratified Monte-Carlo estimate of `E[max(Y - best, 0)]`, `Y ~ N(mean, var)`.
pub fn mc_expected_improvement(mean: f64, var: f64, best: f64, draws: usize, r: &mut rng::Rng) -> f64 {
    let normal = Normal::new(mean, var.sqrt()).unwrap();
    let sum: f64 = (0..draws)
        .map(|i| {
            let u = (i as f64 + r.random::<f64>()) / draws as f64;
            (normal.inverse_cdf(u.clamp(1e-300, 1.0 - 1e-16)) - best).max(0.0)
        })
        .sum();
    sum / draws as f64
}

pub fn brute_chamfer(x: &[Point3], y: &[Point3]) -> f64 {
    let d = |a: &Point3, b: &Point3| (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>();
    let half = |a: &[Point3], b: &[Point3]| {
        a.iter()
            .map(|p| b.iter().map(|q| d(p, q)).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / a.len() as f64
    };
    half(x, y) + half(y, x)
}

/// Simpson integration of q log(q/p) for 1-D Gaussians.
pub fn kl_quadrature(mq: f64, sq: f64, mp: f64, sp: f64) -> f64 {
    let log_pdf = |x: f64, m: f64, s: f64| {
        -(x - m).powi(2) / (2.0 * s * s) - (s * (2.0 * std::f64::consts::PI).sqrt()).ln()
    };
    let (lo, hi) = (mq - 12.0 * sq, mq + 12.0 * sq);
    let n = 20_000;
    let h = (hi - lo) / n as f64;
    let f = |x: f64| {
        let lq = log_pdf(x, mq, sq);
        lq.exp() * (lq - log_pdf(x, mp, sp))
    };
    let mut s = f(lo) + f(hi);
    for i in 1..n {
        s += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

pub fn hnpu_scene(n: usize, seed: u64, c: u32) -> (Vec<Point3>, PseudoLabels) {
    let mut r = rng::seeded(seed);
    let points: Vec<Point3> = (0..n)
        .map(|_| [r.random_range(0.0..4.0), r.random_range(0.0..4.0), r.random_range(0.0..0.5)])
        .collect();
    // spatially coherent classes with random confidences
    let labels: Vec<u32> = points
        .iter()
        .map(|p| if r.random_bool(0.15) { r.random_range(0..c) } else { (p[0] as u32 + p[1] as u32) % c })
        .collect();
    let confidence: Vec<f64> = (0..n).map(|_| r.random_range(0.2..1.0)).collect();
    let valid = confidence.iter().map(|&x| x >= 0.6).collect();
    (
        points,
        PseudoLabels {
            labels,
            confidence,
            valid,
        },
    )
}

pub fn hnpu_audit(points: &[Point3], before: &PseudoLabels, after: &PseudoLabels, cfg: &HnpuConfig) -> std::result::Result<(), String> {
    let neighbors = neighbor_lists(&SpatialIndex::from_points(points), cfg.k);
    for i in 0..points.len() {
        if before.confidence[i] >= cfg.tau_high {
            if after.labels[i] != before.labels[i] || after.confidence[i] != before.confidence[i] || after.valid[i] != before.valid[i] {
                return Err(format!("high-confidence point {i} changed"));
            }
            continue;
        }
        let updated = after.labels[i] != before.labels[i] || after.confidence[i] != before.confidence[i];
        if updated {
            let support = neighbors[i]
                .iter()
                .filter(|&&j| after.confidence[j] >= cfg.tau_high && after.labels[j] == after.labels[i])
                .count();
            if support < cfg.quorum {
                return Err(format!("point {i} relabeled to {} with support {support}", after.labels[i]));
            }
        }
    }
    Ok(())
}
