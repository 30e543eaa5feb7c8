//! Distance-modulated PGD perturbation, label corruption and dataset contamination.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index;

use crate::autodiff::{softmax_rows, SegModel, Tape};
use crate::cloud::io::{list_scans, ScanEntry};
use crate::cloud::{class_histogram, viewpoint_distances, ClassStats, LabeledCloud};
use crate::error::{Error, Result};
use crate::losses::cross_entropy_on_tape;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackConfig {
    /// L-infinity budget (m) at the far end of the ramp.
    pub base_epsilon: f64,
    pub steps: usize,
    /// Step length (m) before the per-point factor.
    pub step_size: f64,
    pub gamma_min: f64,
    pub gamma_max: f64,
    pub d_near: f64,
    pub d_far: f64,
    pub selection_perc: f64,
    pub flip_fraction: f64,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self::with_budget(0.2, 10)
    }
}

impl AttackConfig {
    /// Defaults with the given budget; the step size is `2.5 * epsilon / steps`.
    pub fn with_budget(base_epsilon: f64, steps: usize) -> Self {
        Self {
            base_epsilon,
            steps,
            step_size: 2.5 * base_epsilon / steps.max(1) as f64,
            gamma_min: 0.2,
            gamma_max: 1.0,
            d_near: 5.0,
            d_far: 45.0,
            selection_perc: 0.5,
            flip_fraction: 0.5,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = 0.0..=1.0;
        let checks = [
            (self.base_epsilon > 0.0, "base_epsilon must be positive"),
            (self.steps >= 1, "steps must be at least 1"),
            (self.step_size > 0.0, "step_size must be positive"),
            (
                self.gamma_min > 0.0 && self.gamma_min <= self.gamma_max,
                "need 0 < gamma_min <= gamma_max",
            ),
            (self.d_near < self.d_far, "need d_near < d_far"),
            (unit.contains(&self.selection_perc), "selection_perc outside [0, 1]"),
            (unit.contains(&self.flip_fraction), "flip_fraction outside [0, 1]"),
        ];
        match checks.iter().find(|c| !c.0) {
            Some((_, msg)) => Err(Error::arg(*msg)),
            None => Ok(()),
        }
    }
}

/// Clamped linear ramp from `gamma_min` at `d_near` to `gamma_max` at `d_far`.
pub fn distance_gamma(distances: &[f64], cfg: &AttackConfig) -> Vec<f64> {
    distances
        .iter()
        .map(|&d| {
            let t = ((d - cfg.d_near) / (cfg.d_far - cfg.d_near)).clamp(0.0, 1.0);
            cfg.gamma_min + (cfg.gamma_max - cfg.gamma_min) * t
        })
        .collect()
}

/// Uniformly random `round(selection_perc * #present)` of the present classes.
pub fn select_classes(stats: &ClassStats, selection_perc: f64, seed: u64) -> BTreeSet<u32> {
    let present = stats.present();
    let k = ((selection_perc.clamp(0.0, 1.0) * present.len() as f64).round() as usize).min(present.len());
    let mut r = rng::substream(seed, "select-classes");
    index::sample(&mut r, present.len(), k)
        .into_iter()
        .map(|i| present[i] as u32)
        .collect()
}

fn target_rows(cloud: &LabeledCloud, targets: &BTreeSet<u32>) -> Vec<usize> {
    (0..cloud.len())
        .filter(|&j| targets.contains(&cloud.labels[j]))
        .collect()
}

/// Untargeted sign-gradient ascent of the cross-entropy of the true labels,
/// restricted to points of the target classes. Each point moves by
/// `gamma_i * step_size` per step and is projected into the L-infinity ball of
/// radius `gamma_i * base_epsilon` around its original position. Neighborhood
/// features are recomputed from the current cloud before every step.
pub fn pgd_attack(
    model: &SegModel,
    cloud: &LabeledCloud,
    targets: &BTreeSet<u32>,
    cfg: &AttackConfig,
) -> Result<LabeledCloud> {
    cfg.validate()?;
    let rows = target_rows(cloud, targets);
    if rows.is_empty() {
        return Ok(cloud.clone());
    }
    let gamma = distance_gamma(&viewpoint_distances(cloud), cfg);
    let labels: Vec<u32> = rows.iter().map(|&j| cloud.labels[j]).collect();
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= model.num_classes) {
        return Err(Error::arg(format!("label {bad} outside the model's {} classes", model.num_classes)));
    }
    let mut adv = cloud.clone();
    for step in 0..cfg.steps {
        let feats = model.features(&adv).select(&rows);
        let mut tape = Tape::new();
        let rec = model.record(&mut tape, &feats, false, true)?;
        let loss = cross_entropy_on_tape(&mut tape, rec.logits, &labels, None)?;
        let grads = tape.backward(loss)?;
        let g = grads.get_or_zeros(rec.coords, feats.coords.dim());
        if !g.iter().all(|v| v.is_finite()) {
            return Err(Error::numeric(format!("pgd step {step}"), "non-finite input gradient"));
        }
        for (r, &j) in rows.iter().enumerate() {
            let eps = gamma[j] * cfg.base_epsilon;
            let step_len = gamma[j] * cfg.step_size;
            for a in 0..3 {
                let orig = cloud.points[j][a];
                let moved = adv.points[j][a] + step_len * sign(g[[r, a]]);
                adv.points[j][a] = moved.clamp(orig - eps, orig + eps);
            }
        }
    }
    Ok(adv)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Most probable class other than `truth`; ties go to the lower class.
pub fn highest_incorrect(probs: &[f64], truth: usize) -> usize {
    let mut best = usize::MAX;
    for (k, &p) in probs.iter().enumerate() {
        if k != truth && (best == usize::MAX || p > probs[best]) {
            best = k;
        }
    }
    best
}

/// Relabels a seeded `round(flip_fraction * n)` sample of the `n` target-class
/// points with the model's highest-confidence incorrect class.
pub fn corrupt_labels(
    model: &SegModel,
    cloud: &LabeledCloud,
    targets: &BTreeSet<u32>,
    flip_fraction: f64,
    seed: u64,
) -> Result<(Vec<u32>, Vec<bool>)> {
    if model.num_classes < 2 {
        return Err(Error::arg("label corruption needs at least two classes"));
    }
    if !(0.0..=1.0).contains(&flip_fraction) {
        return Err(Error::arg("flip_fraction outside [0, 1]"));
    }
    let rows = target_rows(cloud, targets);
    let mut labels = cloud.labels.clone();
    let mut mask = vec![false; cloud.len()];
    let k = ((flip_fraction * rows.len() as f64).round() as usize).min(rows.len());
    if k == 0 {
        return Ok((labels, mask));
    }
    let mut r = rng::substream(seed, "corrupt-labels");
    let mut chosen: Vec<usize> = index::sample(&mut r, rows.len(), k).into_iter().map(|i| rows[i]).collect();
    chosen.sort_unstable();
    let feats = model.features(cloud).select(&chosen);
    let probs = softmax_rows(&model.forward(&feats)?);
    for (r, &j) in chosen.iter().enumerate() {
        let truth = labels[j] as usize;
        if truth >= model.num_classes {
            return Err(Error::Data {
                ordinal: j,
                message: format!("label {truth} outside the model's classes"),
            });
        }
        labels[j] = highest_incorrect(probs.row(r).as_slice().unwrap(), truth) as u32;
        mask[j] = true;
    }
    Ok((labels, mask))
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub sequence: String,
    pub id: String,
    /// `None` for a processed scan, otherwise the reason it was skipped.
    pub skipped: Option<String>,
    pub selected: Vec<u32>,
    /// `(original class, flipped points)` for every selected class.
    pub flips: Vec<(u32, usize)>,
    /// Largest and mean Euclidean displacement (m) over attacked points, as written.
    pub max_perturbation: f64,
    pub mean_perturbation: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ContaminationManifest {
    pub rows: Vec<ManifestRow>,
}

pub const MANIFEST_FILE: &str = "manifest.tsv";
const MANIFEST_HEADER: &str = "sequence\tid\tstatus\tselected\tflips\tmax_perturbation\tmean_perturbation";

fn join<T: ToString>(items: impl Iterator<Item = T>) -> String {
    let s: Vec<String> = items.map(|v| v.to_string()).collect();
    if s.is_empty() {
        "-".into()
    } else {
        s.join(",")
    }
}

impl ContaminationManifest {
    pub fn total_flips(&self) -> usize {
        self.rows.iter().flat_map(|r| &r.flips).map(|f| f.1).sum()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from(MANIFEST_HEADER);
        out.push('\n');
        for r in &self.rows {
            let status = match &r.skipped {
                None => "ok".to_string(),
                Some(why) => format!("skipped: {}", why.replace(['\t', '\n'], " ")),
            };
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{:e}\t{:e}",
                r.sequence,
                r.id,
                status,
                join(r.selected.iter()),
                join(r.flips.iter().map(|(c, n)| format!("{c}:{n}"))),
                r.max_perturbation,
                r.mean_perturbation
            );
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |line: usize, m: &str| Error::Data {
            ordinal: line,
            message: m.to_string(),
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h == MANIFEST_HEADER => {}
            _ => return Err(bad(0, "missing manifest header")),
        }
        let list = |s: &str| -> Vec<String> {
            if s == "-" {
                Vec::new()
            } else {
                s.split(',').map(str::to_string).collect()
            }
        };
        let mut rows = Vec::new();
        for (i, line) in lines {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 7 {
                return Err(bad(i, "expected 7 tab-separated fields"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(i, "bad number"));
            let selected = list(f[3])
                .iter()
                .map(|s| s.parse().map_err(|_| bad(i, "bad class id")))
                .collect::<Result<_>>()?;
            let flips = list(f[4])
                .iter()
                .map(|s| {
                    let (c, n) = s.split_once(':').ok_or_else(|| bad(i, "bad flip entry"))?;
                    Ok((
                        c.parse().map_err(|_| bad(i, "bad class id"))?,
                        n.parse().map_err(|_| bad(i, "bad flip count"))?,
                    ))
                })
                .collect::<Result<_>>()?;
            rows.push(ManifestRow {
                sequence: f[0].to_string(),
                id: f[1].to_string(),
                skipped: f[2].strip_prefix("skipped: ").map(str::to_string),
                selected,
                flips,
                max_perturbation: num(f[5])?,
                mean_perturbation: num(f[6])?,
            });
        }
        Ok(Self { rows })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

/// Perturbs coordinates and corrupts labels of the `targets` classes of one scan.
/// Flip sampling is seeded by `(cfg.seed, scan_key)`.
pub fn contaminate_scan(
    model: &SegModel,
    cloud: &LabeledCloud,
    targets: &BTreeSet<u32>,
    cfg: &AttackConfig,
    scan_key: &str,
) -> Result<(LabeledCloud, Vec<bool>)> {
    let seed = rng::substream_seed(cfg.seed, scan_key);
    let mut adv = pgd_attack(model, cloud, targets, cfg)?;
    let (labels, mask) = corrupt_labels(model, cloud, targets, cfg.flip_fraction, seed)?;
    adv.labels = labels;
    Ok((adv, mask))
}

/// Classes attacked throughout a dataset: one draw over the classes present
/// in any scan, seeded by `cfg.seed`.
pub fn select_dataset_classes(stats: &ClassStats, cfg: &AttackConfig) -> BTreeSet<u32> {
    select_classes(stats, cfg.selection_perc, cfg.seed)
}

fn write_scan(src: &ScanEntry, dst: &ScanEntry, adv: &LabeledCloud) -> Result<()> {
    // rewrite only the semantic half of each label word so instance ids survive
    let raw = fs::read(&src.label).map_err(|e| Error::io(&src.label, e))?;
    let mut lab = Vec::with_capacity(raw.len());
    for (w, &l) in raw.chunks_exact(4).zip(&adv.labels) {
        let word = u32::from_le_bytes(w.try_into().unwrap());
        lab.extend_from_slice(&((word & 0xFFFF_0000) | (l & 0xFFFF)).to_le_bytes());
    }
    let mut bin = Vec::with_capacity(adv.len() * 16);
    for (i, p) in adv.points.iter().enumerate() {
        let r = adv.intensity.as_ref().map_or(0.0, |v| v[i]);
        for v in [p[0] as f32, p[1] as f32, p[2] as f32, r] {
            bin.extend_from_slice(&v.to_le_bytes());
        }
    }
    for (path, bytes) in [(&dst.bin, &bin), (&dst.label, &lab)] {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn load_labeled(src: &ScanEntry) -> Result<LabeledCloud> {
    if !src.label.exists() {
        return Err(Error::arg("scan has no label file"));
    }
    src.load()
}

fn process(
    model: &SegModel,
    src: &ScanEntry,
    dst: &ScanEntry,
    selected: &BTreeSet<u32>,
    cfg: &AttackConfig,
) -> Result<ManifestRow> {
    let cloud = load_labeled(src)?;
    let stats = class_histogram(&cloud.labels, model.num_classes)?;
    let targets: BTreeSet<u32> = selected
        .iter()
        .copied()
        .filter(|&c| stats.counts[c as usize] > 0)
        .collect();
    let key = format!("{}/{}", src.sequence, src.id);
    let (adv, mask) = contaminate_scan(model, &cloud, &targets, cfg, &key)?;
    write_scan(src, dst, &adv)?;
    let rows = target_rows(&cloud, &targets);
    let disp: Vec<f64> = rows
        .iter()
        .map(|&j| {
            let (a, b) = (cloud.points[j], adv.points[j]);
            (0..3)
                .map(|k| (b[k] as f32 as f64 - a[k]).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let flips = targets
        .iter()
        .map(|&c| {
            let n = (0..cloud.len()).filter(|&j| mask[j] && cloud.labels[j] == c).count();
            (c, n)
        })
        .collect();
    Ok(ManifestRow {
        sequence: src.sequence.clone(),
        id: src.id.clone(),
        skipped: None,
        selected: targets.into_iter().collect(),
        flips,
        max_perturbation: disp.iter().copied().fold(0.0, f64::max),
        mean_perturbation: if disp.is_empty() {
            0.0
        } else {
            disp.iter().sum::<f64>() / disp.len() as f64
        },
    })
}

/// Writes a contaminated mirror of `in_root` under `out_root` together with
/// `out_root/manifest.tsv`. The attacked classes are drawn once from the
/// classes present anywhere in the dataset. Unreadable scans are listed as
/// skipped.
pub fn contaminate_dataset(
    in_root: &Path,
    out_root: &Path,
    model: &SegModel,
    cfg: &AttackConfig,
) -> Result<ContaminationManifest> {
    cfg.validate()?;
    let scans = list_scans(in_root)?;
    if scans.is_empty() {
        return Err(Error::arg(format!("no scans under {}", in_root.display())));
    }
    let mut totals = ClassStats::from_counts(vec![0; model.num_classes]);
    for src in &scans {
        let stats = load_labeled(src).and_then(|c| class_histogram(&c.labels, model.num_classes));
        if let Ok(s) = stats {
            totals = totals.merge(&s)?;
        }
    }
    let selected = select_dataset_classes(&totals, cfg);
    let mut manifest = ContaminationManifest::default();
    for src in &scans {
        let dst = src.rebase(out_root);
        let row = process(model, src, &dst, &selected, cfg).unwrap_or_else(|e| ManifestRow {
            sequence: src.sequence.clone(),
            id: src.id.clone(),
            skipped: Some(e.to_string()),
            selected: Vec::new(),
            flips: Vec::new(),
            max_perturbation: 0.0,
            mean_perturbation: 0.0,
        });
        manifest.rows.push(row);
    }
    let path = out_root.join(MANIFEST_FILE);
    fs::create_dir_all(out_root).map_err(|e| Error::io(out_root, e))?;
    fs::write(&path, manifest.to_text()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gamma_ramp() {
        let cfg = AttackConfig::default();
        let g = distance_gamma(&[0.0, 5.0, 25.0, 45.0, 100.0], &cfg);
        assert_eq!(g[0], 0.2);
        assert_eq!(g[1], 0.2);
        assert!((g[2] - 0.6).abs() < 1e-15);
        assert_eq!(g[3], 1.0);
        assert_eq!(g[4], 1.0);
    }

    #[test]
    fn selection_sizes() {
        let stats = ClassStats::from_counts(vec![5; 19]);
        assert_eq!(select_classes(&stats, 1.0, 3).len(), 19);
        assert!(select_classes(&stats, 0.0, 3).is_empty());
        let a = select_classes(&stats, 0.5, 3);
        assert_eq!(a.len(), 10);
        assert_eq!(a, select_classes(&stats, 0.5, 3));
        let sparse = ClassStats::from_counts(vec![0, 4, 0, 2]);
        assert_eq!(select_classes(&sparse, 1.0, 0).into_iter().collect::<Vec<_>>(), [1, 3]);
    }

    #[test]
    fn highest_incorrect_example() {
        assert_eq!(highest_incorrect(&[0.7, 0.2, 0.1], 0), 1);
        assert_eq!(highest_incorrect(&[0.1, 0.2, 0.7], 2), 1);
        assert_eq!(highest_incorrect(&[0.5, 0.25, 0.25], 0), 1);
    }

    #[test]
    fn config_validation() {
        assert!(AttackConfig::default().validate().is_ok());
        let mut c = AttackConfig::default();
        c.gamma_min = 0.0;
        assert!(c.validate().is_err());
        let mut c = AttackConfig::default();
        c.d_far = 5.0;
        assert!(c.validate().is_err());
        let mut c = AttackConfig::default();
        c.flip_fraction = 1.5;
        assert!(c.validate().is_err());
        assert!((AttackConfig::default().step_size - 0.05).abs() < 1e-15);
    }

    #[test]
    fn manifest_text_round_trip() {
        let m = ContaminationManifest {
            rows: vec![
                ManifestRow {
                    sequence: "00".into(),
                    id: "000001".into(),
                    skipped: None,
                    selected: vec![1, 4],
                    flips: vec![(1, 12), (4, 0)],
                    max_perturbation: 0.123456789,
                    mean_perturbation: 0.05,
                },
                ManifestRow {
                    sequence: "00".into(),
                    id: "000002".into(),
                    skipped: Some("bad file".into()),
                    selected: vec![],
                    flips: vec![],
                    max_perturbation: 0.0,
                    mean_perturbation: 0.0,
                },
            ],
        };
        assert_eq!(ContaminationManifest::parse(&m.to_text()).unwrap(), m);
        assert_eq!(m.total_flips(), 12);
    }
}
