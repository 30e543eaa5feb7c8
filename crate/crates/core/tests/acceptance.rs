mod common;

use std::collections::BTreeSet;
use std::io::Write;
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use advseg::adaptation::{hnpu_update, HnpuConfig};
use advseg::attack::{contaminate_scan, distance_gamma, select_classes, AttackConfig};
use advseg::autodiff::{softmax_rows, Tape};
use advseg::bo::{expected_improvement, gp_posterior, optimize_lambda};
use advseg::cloud::io::{load_kitti_scan, save_kitti_scan};
use advseg::cloud::{class_histogram, synth_scene, viewpoint_distances, ClassStats, LabeledCloud, Point3, SceneSpec, SpatialIndex};
use advseg::decoder::*;
use advseg::eval::*;
use advseg::losses::*;
use advseg::rng;
use advseg::train::{Objective, TrainConfig};
use advseg::autodiff::{FeatureRecipe, Parameterized, SegModel};
use rand::Rng;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

/// Prints the verdict line outside the test harness capture, then asserts.
fn verdict(id: u32, name: &str, failures: &[String], detail: &str, elapsed: Duration) {
    let status = if failures.is_empty() { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(
        out,
        "criterion {id:>2} {status} {name} [{:.1}s] {detail}{}",
        elapsed.as_secs_f64(),
        if failures.is_empty() { String::new() } else { format!(" | {}", failures.join("; ")) }
    );
    let _ = out.flush();
    assert!(failures.is_empty(), "criterion {id} ({name}): {}", failures.join("; "));
}

fn check(failures: &mut Vec<String>, ok: bool, msg: impl FnOnce() -> String) {
    if !ok {
        failures.push(msg());
    }
}

fn within(failures: &mut Vec<String>, elapsed: Duration, limit: Duration) {
    check(failures, elapsed <= limit, || format!("took {:.1}s, limit {:.0}s", elapsed.as_secs_f64(), limit.as_secs_f64()));
}

#[test]
fn c01_gradient_correctness() {
    let _g = serial();
    let t = Instant::now();
    let reports: Vec<_> = (0..100).map(common::gradcheck_trial).collect();
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let elapsed = t.elapsed();
    let mut f = Vec::new();
    check(&mut f, worst <= 1e-4, || format!("worst relative error {worst:.3e}"));
    check(&mut f, reports.iter().all(|r| r.passed), || "a net failed its check".into());
    within(&mut f, elapsed, Duration::from_secs(60));
    verdict(1, "gradient correctness", &f, &format!("100 nets, worst {worst:.2e}"), elapsed);
}

#[test]
fn c02_attack_budget_locality_and_flips() {
    let _g = serial();
    let t = Instant::now();
    let train: Vec<LabeledCloud> = (0..2).map(|i| synth_scene(&SceneSpec::source(6000, 900 + i)).unwrap()).collect();
    let cfg = TrainConfig {
        epochs: 4,
        ..TrainConfig::default()
    };
    let model = pretrain(&train, 8, &cfg, Objective::CrossEntropy, 1).unwrap();
    let mut f = Vec::new();
    let mut flips = 0usize;
    for s in 0..20u64 {
        let cloud = synth_scene(&SceneSpec::source(20_000, 1000 + s)).unwrap();
        let acfg = AttackConfig {
            seed: s,
            ..AttackConfig::default()
        };
        let targets = select_classes(&class_histogram(&cloud.labels, 8).unwrap(), acfg.selection_perc, s);
        let (adv, mask) = contaminate_scan(&model, &cloud, &targets, &acfg, &format!("scan{s}")).unwrap();
        let dist = viewpoint_distances(&cloud);
        let gamma = distance_gamma(&dist, &acfg);
        let mut order: Vec<usize> = (0..cloud.len()).collect();
        order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]));
        check(&mut f, order.windows(2).all(|w| gamma[w[0]] <= gamma[w[1]]), || format!("scan {s}: gamma not monotone"));
        for j in 0..cloud.len() {
            if targets.contains(&cloud.labels[j]) {
                let bound = gamma[j] * acfg.base_epsilon + 1e-9;
                if (0..3).any(|a| (adv.points[j][a] - cloud.points[j][a]).abs() > bound) {
                    f.push(format!("scan {s} point {j}: budget exceeded"));
                    break;
                }
            } else if adv.points[j].map(f64::to_bits) != cloud.points[j].map(f64::to_bits) {
                f.push(format!("scan {s} point {j}: untargeted point moved"));
                break;
            }
            if mask[j] {
                flips += 1;
                if adv.labels[j] == cloud.labels[j] {
                    f.push(format!("scan {s} point {j}: flip kept the true label"));
                    break;
                }
            } else if adv.labels[j] != cloud.labels[j] {
                f.push(format!("scan {s} point {j}: unflagged label change"));
                break;
            }
        }
    }
    let elapsed = t.elapsed();
    check(&mut f, flips > 0, || "no labels flipped".into());
    within(&mut f, elapsed, Duration::from_secs(120));
    verdict(2, "attack budget, locality, flips", &f, &format!("20 scans, {flips} flips"), elapsed);
}

#[test]
fn c03_loss_identities() {
    let _g = serial();
    let t = Instant::now();
    let mut f = Vec::new();
    let mut r = rng::seeded(33);
    for trial in 0..50 {
        let (n, c) = (r.random_range(4..60), r.random_range(2..7));
        let logits = advseg::autodiff::gaussian_mat(n, c, 2.0, &mut r);
        let labels: Vec<u32> = (0..n).map(|_| r.random_range(0..c as u32)).collect();
        let imp: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
        let mask = key_point_mask(&imp, &labels, 0.3).unwrap();
        let margins = dynamic_margins(&class_histogram(&labels, c).unwrap(), 0.25, 0.5).unwrap();
        let scale = 4.0;
        let kps = kps_loss(&logits, &labels, &mask, &margins, scale).unwrap();
        let sd = soft_dice(&softmax_rows(&logits), &labels).unwrap();
        for (lambda, want) in [(0.0, sd), (1.0, kps)] {
            let mut tape = Tape::new();
            let z = tape.constant(logits.clone());
            let k = kps_on_tape(&mut tape, z, &labels, &mask, &margins, scale, None).unwrap();
            let d = soft_dice_on_tape(&mut tape, z, &labels, None).unwrap();
            let v = rlt_on_tape(&mut tape, lambda, k, d).unwrap();
            let got = tape.scalar(v);
            check(&mut f, (got - want).abs() <= 1e-12, || format!("trial {trial}: blend({lambda}) {got} vs {want}"));
        }
        let ce = cross_entropy(&logits, &labels).unwrap();
        let full = KeyPointMask {
            key: vec![true; n],
            thresholds: vec![],
            top_fraction: 1.0,
        };
        let zero = MarginTable::zeros(c);
        let at_one = kps_loss(&logits, &labels, &full, &zero, 1.0).unwrap();
        let empty = kps_loss(&logits, &labels, &KeyPointMask::empty(n), &margins, scale).unwrap();
        check(&mut f, (at_one - ce).abs() <= 1e-12, || format!("trial {trial}: zero margins {at_one} vs CE {ce}"));
        check(&mut f, (empty - ce).abs() <= 1e-12, || format!("trial {trial}: empty mask {empty} vs CE {ce}"));
    }
    let point = |r: &mut rng::Rng| -> Point3 { std::array::from_fn(|_| r.random_range(-5.0..5.0)) };
    for pair in 0..100 {
        let x: Vec<Point3> = (0..r.random_range(1..60)).map(|_| point(&mut r)).collect();
        let y: Vec<Point3> = (0..r.random_range(1..60)).map(|_| point(&mut r)).collect();
        let (a, b) = (chamfer(&x, &y).unwrap(), chamfer(&y, &x).unwrap());
        let brute = common::brute_chamfer(&x, &y);
        check(&mut f, a == b, || format!("pair {pair}: asymmetric {a} vs {b}"));
        check(&mut f, (a - brute).abs() <= 1e-12 * (1.0 + a), || format!("pair {pair}: {a} vs brute {brute}"));
    }
    for case in 0..50 {
        let (mq, sq) = (r.random_range(-2.0..2.0), r.random_range(0.3..2.5));
        let (mp, sp) = (r.random_range(-2.0..2.0), r.random_range(0.5..2.5));
        let kl = kl_diag_gaussian(&LatentGaussian::new(vec![mq], vec![sq]).unwrap(), &LatentGaussian::new(vec![mp], vec![sp]).unwrap()).unwrap();
        let quad = common::kl_quadrature(mq, sq, mp, sp);
        check(&mut f, (kl - quad).abs() <= 1e-3, || format!("KL case {case}: {kl} vs quadrature {quad}"));
    }
    for v in 0..1000 {
        let counts: Vec<u64> = (0..r.random_range(2..12)).map(|_| r.random_range(1..5000)).collect();
        let m = dynamic_margins(&ClassStats::from_counts(counts.clone()), 0.25, 0.5).unwrap().margins;
        let bad = (0..counts.len())
            .flat_map(|a| (0..counts.len()).map(move |b| (a, b)))
            .any(|(a, b)| counts[a] <= counts[b] && m[a] < m[b]);
        check(&mut f, !bad, || format!("count vector {v}: margins not anti-monotone"));
    }
    let elapsed = t.elapsed();
    verdict(3, "loss identities", &f, "50 blends, 100 chamfer pairs, 50 KL cases, 1000 margin tables", elapsed);
}

#[test]
fn c04_neighborhood_pseudo_label_update() {
    let _g = serial();
    let t = Instant::now();
    let mut f = Vec::new();
    let cfg = HnpuConfig::default();
    for s in 0..50u64 {
        let (points, pseudo) = common::hnpu_scene(2000, 400 + s, 8);
        let index = SpatialIndex::from_points(&points);
        let once = hnpu_update(&pseudo, &index, &cfg).unwrap();
        if let Err(e) = common::hnpu_audit(&points, &pseudo, &once, &cfg) {
            f.push(format!("scene {s}: {e}"));
        }
        let twice = hnpu_update(&once, &index, &cfg).unwrap();
        check(&mut f, twice.labels == once.labels, || format!("scene {s}: second pass changed labels"));
    }
    let elapsed = t.elapsed();
    within(&mut f, elapsed, Duration::from_secs(60));
    verdict(4, "neighborhood pseudo-label update", &f, "50 scenes", elapsed);
}

struct DecoderRun {
    model: DecoderModel,
    trace: DecoderTrace,
    elapsed: Duration,
}

fn decoder_run() -> &'static DecoderRun {
    static RUN: OnceLock<DecoderRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let t = Instant::now();
        let shapes = shape_family(&ShapeKind::ALL, 50, 256, 1);
        let mut model = DecoderModel::new(DecoderConfig::default(), 3);
        let cfg = DecoderTrainConfig {
            epochs: 200,
            seed: 4,
            ..Default::default()
        };
        let trace = train_decoder(&mut model, &shapes, &cfg).unwrap();
        DecoderRun {
            model,
            trace,
            elapsed: t.elapsed(),
        }
    })
}

#[test]
fn c05_decoder_denoising() {
    let _g = serial();
    let t = Instant::now();
    let run = decoder_run();
    let mut f = Vec::new();
    let mut wins = 0;
    let held = shape_family(&ShapeKind::ALL, 20, 256, 2);
    for (i, s) in held.iter().enumerate() {
        let (noisy, _) = perturb_points(s, 0.05, &AugmentBounds::identity(), 100 + i as u64).unwrap();
        if chamfer(&run.model.restore(&noisy).unwrap(), s).unwrap() < chamfer(&noisy, s).unwrap() {
            wins += 1;
        }
    }
    let total = &run.trace.total;
    let lead = total[..10].iter().sum::<f64>() / 10.0;
    let trail = total[total.len() - 10..].iter().sum::<f64>() / 10.0;
    let elapsed = run.elapsed.max(t.elapsed());
    check(&mut f, wins * 5 >= held.len() * 4, || format!("denoised {wins}/{}", held.len()));
    check(&mut f, trail <= lead, || format!("trailing loss {trail:.4} above leading {lead:.4}"));
    within(&mut f, elapsed, Duration::from_secs(600));
    verdict(5, "decoder denoising", &f, &format!("denoised {wins}/20, loss {lead:.4} -> {trail:.4}"), elapsed);
}

#[test]
fn c05_decoder_reconstruction_drops() {
    let _g = serial();
    let run = decoder_run();
    let total = &run.trace.total;
    let (first, last) = (total[0], *total.last().unwrap());
    let mut f = Vec::new();
    check(&mut f, last < 0.3 * first, || format!("final loss {last:.4} not below 0.3 x initial {first:.4}"));
    verdict(5, "decoder reconstruction drop", &f, &format!("{first:.4} -> {last:.4}"), run.elapsed);
}

#[test]
fn c06_lambda_search() {
    let _g = serial();
    let t = Instant::now();
    let mut f = Vec::new();
    for seed in 0..10 {
        let mut obj = |x: f64| -(x - 0.3) * (x - 0.3);
        let res = optimize_lambda(&mut obj, 20, seed).unwrap();
        check(&mut f, res.trace.len() <= 20, || format!("seed {seed}: {} evaluations", res.trace.len()));
        check(&mut f, (res.best_lambda - 0.3).abs() <= 0.05, || format!("seed {seed}: lambda {}", res.best_lambda));
    }
    let mut r = rng::seeded(66);
    let mut states = 0;
    while states < 20 {
        let state = common::bo_state(&mut r);
        let x = r.random_range(0.0..=1.0);
        let (m, v) = gp_posterior(&state, x).unwrap();
        let ei = expected_improvement(&state, x).unwrap();
        // relative error is meaningless once EI underflows
        if v < 1e-4 || ei < 1e-3 * v.sqrt() {
            continue;
        }
        let mc = common::mc_expected_improvement(m, v, state.incumbent().unwrap().1, 1_000_000, &mut r);
        check(&mut f, (ei - mc).abs() <= 0.01 * mc, || format!("state {states}: EI {ei} vs MC {mc}"));
        states += 1;
    }
    let elapsed = t.elapsed();
    verdict(6, "lambda search", &f, "10 seeds, 20 EI states", elapsed);
}

#[test]
fn c07_segmentation_metrics() {
    let _g = serial();
    let t = Instant::now();
    let mut f = Vec::new();
    for seed in 0..1000 {
        let c = 2 + (seed % 9) as usize;
        let (pred, truth, cm) = common::random_labels(seed, c);
        let want = common::set_iou(&pred, &truth, c);
        check(&mut f, iou_per_class(&cm) == want, || format!("matrix {seed}: IoU differs from set oracle"));
        let defined: Vec<f64> = want.iter().flatten().copied().collect();
        let m = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
        check(&mut f, miou(&cm) == m, || format!("matrix {seed}: mIoU differs from set oracle"));
    }
    let elapsed = t.elapsed();
    verdict(7, "segmentation metrics", &f, "1000 matrices", elapsed);
}

#[test]
fn c08_end_to_end_experiment() {
    let _g = serial();
    let t = Instant::now();
    let cfg = ExperimentConfig {
        seeds: (0..10).collect(),
        ..ExperimentConfig::default()
    };
    let res = run_experiment(&cfg).unwrap();
    let elapsed = t.elapsed();
    let mean = |row: Row| res.mean_miou(row).unwrap_or(f64::NAN);
    let (clean, attacked, all) = (mean(Row::Clean), mean(Row::Baseline), mean(Row::All));
    let recovered = (all - attacked) / (clean - attacked);
    let mut f = Vec::new();
    check(&mut f, attacked <= 0.7 * clean, || format!("attacked {attacked:.4} above 0.7 x clean {clean:.4}"));
    check(&mut f, recovered >= 0.25, || format!("recovered {:.1}% of the gap", 100.0 * recovered));
    let mut pairs: Vec<(Row, Row)> = [Row::Rlt, Row::Decoder, Row::FineTune].iter().map(|&r| (Row::All, r)).collect();
    pairs.extend([Row::Rlt, Row::Decoder, Row::FineTune].iter().map(|&r| (r, Row::Baseline)));
    let mut counts = Vec::new();
    for (better, worse) in pairs {
        let v = res.violations(better, worse);
        counts.push(format!("{}>={}:{v}", better.key(), worse.key()));
        check(&mut f, v <= 2, || format!("{} below {} on {v}/10 seeds", better.label(), worse.label()));
    }
    within(&mut f, elapsed, Duration::from_secs(1800));
    let _ = writeln!(std::io::stdout().lock(), "{}", res.summary());
    let detail = format!(
        "clean {clean:.4}, attacked {attacked:.4}, all {all:.4}, recovered {:.1}%, violations {}",
        100.0 * recovered,
        counts.join(" ")
    );
    verdict(8, "end-to-end experiment", &f, &detail, elapsed);
}

#[test]
fn c09_distribution_shift_spares_tail_classes() {
    let _g = serial();
    let t = Instant::now();
    let train: Vec<LabeledCloud> = (0..2).map(|i| synth_scene(&SceneSpec::source(6000, 500 + i)).unwrap()).collect();
    let cfg = TrainConfig {
        epochs: 4,
        ..TrainConfig::default()
    };
    let model = pretrain(&train, 8, &cfg, Objective::CrossEntropy, 1).unwrap();
    let mut f = Vec::new();
    let mut head_shift = Vec::new();
    for s in 0..10u64 {
        let cloud = synth_scene(&SceneSpec::source(20_000, s)).unwrap();
        let before = class_histogram(&cloud.labels, 8).unwrap();
        let head = (0..8).max_by_key(|&k| before.counts[k]).unwrap();
        let targets: BTreeSet<u32> = [head as u32].into();
        let acfg = AttackConfig {
            seed: s,
            ..AttackConfig::default()
        };
        let (adv, _) = contaminate_scan(&model, &cloud, &targets, &acfg, "scene").unwrap();
        let report = distribution_shift_report(&before, &class_histogram(&adv.labels, 8).unwrap()).unwrap();
        let head_rel = report.row(head).and_then(|r| r.relative).unwrap().abs();
        head_shift.push(head_rel);
        let mut freqs = before.frequencies.clone();
        freqs.sort_by(f64::total_cmp);
        let median = (freqs[3] + freqs[4]) / 2.0;
        for row in report.rows.iter().filter(|r| r.before > 0.0 && r.before < median) {
            let rel = row.relative.unwrap().abs();
            check(&mut f, rel < head_rel, || format!("scene {s}: tail class {} shifted {rel:.3} vs head {head_rel:.3}", row.class));
        }
    }
    let elapsed = t.elapsed();
    let mean_head = head_shift.iter().sum::<f64>() / head_shift.len() as f64;
    verdict(9, "distribution shift", &f, &format!("10 scenes, mean head |relative| {mean_head:.3}"), elapsed);
}

#[test]
fn c10_serialization_round_trips() {
    let _g = serial();
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut f = Vec::new();
    let mut r = rng::seeded(10);
    for i in 0..20 {
        let n = r.random_range(0..2000);
        let points: Vec<Point3> = (0..n).map(|_| std::array::from_fn(|_| r.random_range(-80.0f32..80.0) as f64)).collect();
        let intensity: Vec<f32> = (0..n).map(|_| r.random::<f32>()).collect();
        let labels: Vec<u32> = (0..n).map(|_| r.random::<u16>() as u32).collect();
        let cloud = LabeledCloud::with_intensity(points, labels, Some(intensity)).unwrap();
        let (bin, lab) = (dir.path().join(format!("{i}.bin")), dir.path().join(format!("{i}.label")));
        save_kitti_scan(&cloud, &bin, &lab).unwrap();
        check(&mut f, load_kitti_scan(&bin, Some(&lab)).unwrap() == cloud, || format!("scan {i} changed"));

        let hidden: Vec<usize> = (0..r.random_range(0..3)).map(|_| r.random_range(1..24)).collect();
        let seg = SegModel::new(FeatureRecipe::default(), &hidden, r.random_range(2..10), r.random());
        let path = dir.path().join(format!("{i}.seg"));
        seg.save(&path).unwrap();
        let back = SegModel::load(&path).unwrap();
        let bits = |m: &SegModel| -> Vec<u32> { m.params().iter().flat_map(|p| p.data.iter().map(|v| v.to_bits())).collect() };
        check(&mut f, back == seg && bits(&back) == bits(&seg), || format!("segmentation checkpoint {i} changed"));

        let dcfg = DecoderConfig {
            latent_dim: r.random_range(1..8),
            coarse_points: r.random_range(4..64),
            ..DecoderConfig::default()
        };
        let mut dec = DecoderModel::new(dcfg, r.random());
        dec.trained = r.random_bool(0.5);
        let path = dir.path().join(format!("{i}.dec"));
        dec.save(&path).unwrap();
        check(&mut f, DecoderModel::load(&path).unwrap() == dec, || format!("decoder checkpoint {i} changed"));
    }
    let elapsed = t.elapsed();
    within(&mut f, elapsed, Duration::from_secs(10));
    verdict(10, "serialization round trips", &f, "20 scans, 20 segmentation and 20 decoder checkpoints", elapsed);
}
