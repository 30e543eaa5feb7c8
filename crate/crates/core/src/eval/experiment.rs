//! End-to-end ablation grid: clean and attacked source domains, each cell
//! running pre-training, optional restoration, adaptation, optional
//! fine-tuning and target evaluation.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::adaptation::{
    adapt, clean_subset, fine_tune, AdaptConfig, AdaptState, CleanSubset, DomainScan, FineTuneConfig, RestoredScan,
};
use crate::attack::{contaminate_scan, select_dataset_classes, AttackConfig};
use crate::autodiff::SegModel;
use crate::bo::{optimize_lambda, BoResult};
use crate::cloud::io::list_scans;
use crate::cloud::{class_histogram, synth_scene, ClassStats, LabeledCloud, SceneSpec};
use crate::decoder::{split_patches, train_decoder, DecoderConfig, DecoderModel, DecoderTrainConfig};
use crate::error::{Error, Result};
use crate::rng;
use crate::train::{train_segmentation, Objective, PreparedScan, RltParams, TrainConfig};

use super::{confusion, distribution_shift_report, iou_per_class, miou_excluding, ConfusionMatrix, ShiftReport};

/// Rows of the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Row {
    /// Baseline adaptation from the clean source.
    Clean,
    /// Baseline adaptation from the attacked source.
    Baseline,
    Rlt,
    Decoder,
    RltDecoder,
    FineTune,
    FineTuneRlt,
    FineTuneDecoder,
    All,
}

/// Components switched on in a row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Toggles {
    pub fine_tune: bool,
    pub rlt: bool,
    pub decoder: bool,
}

impl Row {
    pub const ALL: [Row; 9] = [
        Row::Clean,
        Row::Baseline,
        Row::Rlt,
        Row::Decoder,
        Row::RltDecoder,
        Row::FineTune,
        Row::FineTuneRlt,
        Row::FineTuneDecoder,
        Row::All,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Row::Clean => "clean",
            Row::Baseline => "CosMix",
            Row::Rlt => "(a)",
            Row::Decoder => "(b)",
            Row::RltDecoder => "(c)",
            Row::FineTune => "(d)",
            Row::FineTuneRlt => "(e)",
            Row::FineTuneDecoder => "(f)",
            Row::All => "(g)",
        }
    }

    /// Short key used in configuration files.
    pub fn key(self) -> &'static str {
        match self {
            Row::Clean => "clean",
            Row::Baseline => "baseline",
            Row::Rlt => "a",
            Row::Decoder => "b",
            Row::RltDecoder => "c",
            Row::FineTune => "d",
            Row::FineTuneRlt => "e",
            Row::FineTuneDecoder => "f",
            Row::All => "g",
        }
    }

    pub fn parse(s: &str) -> Result<Row> {
        let s = s.trim();
        Row::ALL
            .into_iter()
            .find(|r| r.key().eq_ignore_ascii_case(s) || r.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::arg(format!("unknown row {s:?}")))
    }

    pub fn toggles(self) -> Toggles {
        let (fine_tune, rlt, decoder) = match self {
            Row::Clean | Row::Baseline => (false, false, false),
            Row::Rlt => (false, true, false),
            Row::Decoder => (false, false, true),
            Row::RltDecoder => (false, true, true),
            Row::FineTune => (true, false, false),
            Row::FineTuneRlt => (true, true, false),
            Row::FineTuneDecoder => (true, false, true),
            Row::All => (true, true, true),
        };
        Toggles {
            fine_tune,
            rlt,
            decoder,
        }
    }

    pub fn attacked(self) -> bool {
        self != Row::Clean
    }
}

/// Where scans come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// Seeded synthetic scenes.
    Synthetic {
        source_scans: usize,
        target_adapt_scans: usize,
        target_eval_scans: usize,
        points_per_scan: usize,
    },
    /// Scan directories in the sequences/velodyne layout.
    Directories {
        source: PathBuf,
        target: PathBuf,
        eval: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub scenario: String,
    pub data: DataSource,
    pub num_classes: usize,
    pub attack: AttackConfig,
    pub pretrain: TrainConfig,
    pub rlt: RltParams,
    /// Evaluations of the lambda search per seed; 0 keeps `rlt.lambda`.
    pub lambda_budget: usize,
    /// Pre-training epochs of each lambda evaluation.
    pub lambda_epochs: usize,
    pub adapt: AdaptConfig,
    pub decoder: DecoderConfig,
    pub decoder_train: DecoderTrainConfig,
    /// Largest scene patch handed to the decoder.
    pub patch_points: usize,
    pub fine_tune: FineTuneConfig,
    /// Fine-tune with the blended objective in rows that enable it.
    pub rlt_in_fine_tune: bool,
    /// Add decoder-restored source points to the target-to-source scenes.
    pub restore_sources: bool,
    /// Fraction of clean source data available to the defender.
    pub clean_fraction: f64,
    pub val_fraction: f64,
    /// Class left out of mIoU, if any.
    pub ignore_class: Option<usize>,
    pub rows: Vec<Row>,
    pub seeds: Vec<u64>,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let attack = AttackConfig {
            flip_fraction: 0.8,
            ..AttackConfig::default()
        };
        Self {
            scenario: "desk".into(),
            data: DataSource::Synthetic {
                source_scans: 6,
                target_adapt_scans: 3,
                target_eval_scans: 2,
                points_per_scan: 20_000,
            },
            num_classes: 8,
            attack,
            pretrain: TrainConfig {
                epochs: 20,
                steps_per_scan: 2,
                ..TrainConfig::default()
            },
            rlt: RltParams::default(),
            lambda_budget: 10,
            lambda_epochs: 5,
            adapt: AdaptConfig {
                steps: 120,
                refresh_every: 10,
                ..AdaptConfig::default()
            },
            decoder: DecoderConfig::default(),
            decoder_train: DecoderTrainConfig {
                epochs: 40,
                ..DecoderTrainConfig::default()
            },
            patch_points: 1024,
            fine_tune: FineTuneConfig::default(),
            rlt_in_fine_tune: false,
            restore_sources: true,
            clean_fraction: 0.05,
            val_fraction: 0.3,
            ignore_class: None,
            rows: Row::ALL.to_vec(),
            seeds: vec![0],
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::arg("at least one seed is required"));
        }
        if self.rows.is_empty() {
            return Err(Error::arg("no rows selected"));
        }
        if self.num_classes < 2 {
            return Err(Error::arg("need at least two classes"));
        }
        if !(self.clean_fraction > 0.0 && self.clean_fraction <= 1.0) {
            return Err(Error::arg("clean_fraction must lie in (0, 1]"));
        }
        self.attack.validate()?;
        self.adapt.hnpu.validate()?;
        if let DataSource::Synthetic {
            source_scans,
            target_adapt_scans,
            target_eval_scans,
            points_per_scan,
        } = self.data
        {
            if source_scans == 0 || target_adapt_scans == 0 || target_eval_scans == 0 || points_per_scan == 0 {
                return Err(Error::arg("synthetic data needs at least one scan of each kind"));
            }
        }
        Ok(())
    }

}

/// Outcome of one grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub row: Row,
    pub seed: u64,
    pub miou: Option<f64>,
    pub per_class: Vec<Option<f64>>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub cells: Vec<CellResult>,
    /// Tuned blend weight, when tuning ran.
    pub lambda: Option<f64>,
    pub attacked_classes: BTreeSet<u32>,
    /// Source label distribution before and after contamination.
    pub shift: Option<ShiftReport>,
}

impl SeedResult {
    pub fn cell(&self, row: Row) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.row == row)
    }

    pub fn miou(&self, row: Row) -> Option<f64> {
        self.cell(row).and_then(|c| c.miou)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub scenario: String,
    pub num_classes: usize,
    pub rows: Vec<Row>,
    pub seeds: Vec<SeedResult>,
}

fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    let v = values.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    Some((m, v.sqrt()))
}

impl ExperimentResult {
    /// mIoU of `row` across seeds where the cell succeeded.
    pub fn values(&self, row: Row) -> Vec<f64> {
        self.seeds.iter().filter_map(|s| s.miou(row)).collect()
    }

    pub fn mean_miou(&self, row: Row) -> Option<f64> {
        mean_std(&self.values(row)).map(|m| m.0)
    }

    /// Seeds where `better` scored below `worse` (failed cells count as violations).
    pub fn violations(&self, better: Row, worse: Row) -> usize {
        self.seeds
            .iter()
            .filter(|s| match (s.miou(better), s.miou(worse)) {
                (Some(b), Some(w)) => b < w,
                _ => true,
            })
            .count()
    }

    /// One line per cell: `seed,row,status,miou,iou_0..`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("seed,row,status,miou");
        for k in 0..self.num_classes {
            let _ = write!(s, ",iou_{k}");
        }
        s.push('\n');
        let f = |v: Option<f64>| v.map_or("nan".to_string(), |x| format!("{x:?}"));
        for seed in &self.seeds {
            for c in &seed.cells {
                let status = if c.error.is_some() { "failed" } else { "ok" };
                let _ = write!(s, "{},{},{},{}", c.seed, c.row.key(), status, f(c.miou));
                for k in 0..self.num_classes {
                    let _ = write!(s, ",{}", f(c.per_class.get(k).copied().flatten()));
                }
                s.push('\n');
            }
        }
        s
    }

    /// Ablation table with mean and deviation of mIoU (in percent) per row.
    pub fn summary(&self) -> String {
        let mut s = format!("scenario {} over {} seed(s)\n\n", self.scenario, self.seeds.len());
        let _ = writeln!(s, "{:<8} {:>3} {:>4} {:>6}  {:>14}  {:>6}", "row", "FT", "RLT", "Pro.D.", "mIoU", "failed");
        for &row in &self.rows {
            let t = row.toggles();
            let mark = |b: bool| if b { "x" } else { "-" };
            let vals = self.values(row);
            let failed = self.seeds.len() - vals.len();
            let m = mean_std(&vals).map_or("n/a".to_string(), |(m, d)| format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * d));
            let _ = writeln!(
                s,
                "{:<8} {:>3} {:>4} {:>6}  {:>14}  {:>6}",
                row.label(),
                mark(t.fine_tune),
                mark(t.rlt),
                mark(t.decoder),
                m,
                failed
            );
        }
        if let (Some(c), Some(a), Some(g)) = (
            self.mean_miou(Row::Clean),
            self.mean_miou(Row::Baseline),
            self.mean_miou(Row::All),
        ) {
            let _ = writeln!(
                s,
                "\nclean {:.2} | attacked {:.2} | attacked+AAF {:.2} | gap recovered {:.1}%",
                100.0 * c,
                100.0 * a,
                100.0 * g,
                100.0 * (g - a) / (c - a)
            );
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: &str, text: &str| {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        put("ious.csv", &self.to_csv())?;
        put("summary.txt", &self.summary())?;
        for seed in &self.seeds {
            if let Some(shift) = &seed.shift {
                put(&format!("shift_seed{}.csv", seed.seed), &shift.to_csv())?;
            }
        }
        Ok(())
    }
}

/// Scans of one seed.
#[derive(Debug, Clone)]
pub struct Domains {
    pub source: Vec<LabeledCloud>,
    pub target_adapt: Vec<LabeledCloud>,
    pub target_eval: Vec<LabeledCloud>,
}

fn load_dir(root: &Path) -> Result<Vec<LabeledCloud>> {
    list_scans(root)?.iter().map(|e| e.load()).collect()
}

pub fn build_domains(data: &DataSource, seed: u64) -> Result<Domains> {
    match data {
        DataSource::Synthetic {
            source_scans,
            target_adapt_scans,
            target_eval_scans,
            points_per_scan,
        } => {
            let make = |n: usize, name: &str, spec: fn(usize, u64) -> SceneSpec| -> Result<Vec<LabeledCloud>> {
                (0..n)
                    .map(|i| synth_scene(&spec(*points_per_scan, rng::substream_seed(seed, &format!("{name}/{i}")))))
                    .collect()
            };
            Ok(Domains {
                source: make(*source_scans, "source", SceneSpec::source)?,
                target_adapt: make(*target_adapt_scans, "target-adapt", SceneSpec::target)?,
                target_eval: make(*target_eval_scans, "target-eval", SceneSpec::target)?,
            })
        }
        DataSource::Directories { source, target, eval } => Ok(Domains {
            source: load_dir(source)?,
            target_adapt: load_dir(target)?,
            target_eval: load_dir(eval)?,
        }),
    }
}

/// Confusion matrix of `model` over labeled scans.
pub fn evaluate(model: &SegModel, scans: &[LabeledCloud]) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(model.num_classes);
    for c in scans {
        let pred = model.predict(&model.features(c))?;
        cm.merge(&confusion(&pred, &c.labels, model.num_classes)?)?;
    }
    Ok(cm)
}

pub fn pretrain(
    scans: &[LabeledCloud],
    num_classes: usize,
    cfg: &TrainConfig,
    objective: Objective,
    seed: u64,
) -> Result<SegModel> {
    let mut model = SegModel::default_for(num_classes, rng::substream_seed(seed, "init"));
    let prepared: Vec<PreparedScan> = scans
        .iter()
        .map(|c| PreparedScan::new(&model, c, &objective))
        .collect::<Result<_>>()?;
    let cfg = TrainConfig {
        objective,
        seed: rng::substream_seed(seed, "pretrain"),
        ..*cfg
    };
    train_segmentation(&mut model, &prepared, &cfg)?;
    Ok(model)
}

/// Bayesian search of the blend weight: each evaluation pre-trains on all
/// but the last `ceil(20%)` of `scans` for `epochs` and scores mIoU on the rest.
pub fn tune_lambda(
    scans: &[LabeledCloud],
    num_classes: usize,
    pretrain_cfg: &TrainConfig,
    rlt: &RltParams,
    epochs: usize,
    budget: usize,
    seed: u64,
) -> Result<BoResult> {
    if scans.len() < 2 {
        return Err(Error::arg("lambda tuning needs at least two scans"));
    }
    let n_val = scans.len().div_ceil(5);
    let (train, val) = scans.split_at(scans.len() - n_val);
    let cfg = TrainConfig {
        epochs,
        ..*pretrain_cfg
    };
    let mut objective = |lambda: f64| -> f64 {
        let obj = Objective::Rlt(RltParams { lambda, ..*rlt });
        pretrain(train, num_classes, &cfg, obj, seed)
            .and_then(|m| evaluate(&m, val))
            .ok()
            .and_then(|cm| super::miou(&cm))
            .unwrap_or(f64::NAN)
    };
    optimize_lambda(&mut objective, budget, rng::substream_seed(seed, "lambda-search"))
}

/// Source scans after contamination by `surrogate`, and the attacked classes.
pub fn attack_sources(
    surrogate: &SegModel,
    scans: &[LabeledCloud],
    cfg: &AttackConfig,
) -> Result<(Vec<LabeledCloud>, BTreeSet<u32>)> {
    let stats = label_stats(scans, surrogate.num_classes)?;
    let targets = select_dataset_classes(&stats, cfg);
    let attacked = scans
        .iter()
        .enumerate()
        .map(|(i, c)| contaminate_scan(surrogate, c, &targets, cfg, &format!("scan/{i}")).map(|r| r.0))
        .collect::<Result<_>>()?;
    Ok((attacked, targets))
}

pub fn label_stats(scans: &[LabeledCloud], num_classes: usize) -> Result<ClassStats> {
    let mut total = ClassStats::from_counts(vec![0; num_classes]);
    for c in scans {
        total = total.merge(&class_histogram(&c.labels, num_classes)?)?;
    }
    Ok(total)
}

/// Clean scene patches holding about `fraction` of the clean points.
pub fn clean_patches(scans: &[LabeledCloud], fraction: f64, patch_points: usize, seed: u64) -> Vec<Vec<[f64; 3]>> {
    let mut patches: Vec<Vec<[f64; 3]>> = Vec::new();
    for c in scans {
        for p in split_patches(&c.points, patch_points) {
            patches.push(p.iter().map(|&j| c.points[j]).collect());
        }
    }
    let total: usize = patches.iter().map(|p| p.len()).sum();
    let want = (fraction * total as f64).round() as usize;
    let mut r = rng::substream(seed, "clean-patches");
    let order = rand::seq::index::sample(&mut r, patches.len(), patches.len());
    let mut out = Vec::new();
    let mut taken = 0;
    for i in order {
        if taken >= want.max(1) {
            break;
        }
        taken += patches[i].len();
        out.push(patches[i].clone());
    }
    out
}

/// Scales patches so their RMS radius about the centroid matches `radius`.
fn normalize_patch(points: &[[f64; 3]], radius: f64) -> Vec<[f64; 3]> {
    let n = points.len() as f64;
    let c: [f64; 3] = std::array::from_fn(|a| points.iter().map(|p| p[a]).sum::<f64>() / n);
    let rms = (points.iter().map(|p| crate::cloud::distance_sq(p, &c)).sum::<f64>() / n).sqrt();
    let k = if rms > 1e-9 { radius / rms } else { 1.0 };
    points.iter().map(|p| std::array::from_fn(|a| (p[a] - c[a]) * k)).collect()
}

/// Trains the restoration decoder on normalized patches holding
/// `cfg.clean_fraction` of the clean points of `scans`.
pub fn train_scene_decoder(scans: &[LabeledCloud], cfg: &ExperimentConfig, seed: u64) -> Result<DecoderModel> {
    let patches = clean_patches(
        scans,
        cfg.clean_fraction,
        cfg.patch_points,
        rng::substream_seed(seed, "decoder-data"),
    );
    let radius = DecoderModel::new(cfg.decoder, 0).reference_radius;
    let shapes: Vec<_> = patches.iter().map(|p| normalize_patch(p, radius)).collect();
    let mut model = DecoderModel::new(cfg.decoder, rng::substream_seed(seed, "decoder-init"));
    let train_cfg = DecoderTrainConfig {
        seed: rng::substream_seed(seed, "decoder-train"),
        ..cfg.decoder_train
    };
    train_decoder(&mut model, &shapes, &train_cfg)?;
    Ok(model)
}

/// Per-seed stage outputs shared between cells.
struct SeedCache<'a> {
    cfg: &'a ExperimentConfig,
    seed: u64,
    domains: Domains,
    attacked: Option<Vec<LabeledCloud>>,
    attacked_classes: BTreeSet<u32>,
    models: HashMap<(bool, bool), SegModel>,
    source_scans: HashMap<(bool, bool), Vec<DomainScan>>,
    target_scans: HashMap<bool, Vec<DomainScan>>,
    subsets: HashMap<bool, CleanSubset>,
    decoder: Option<DecoderModel>,
    lambda: Option<f64>,
    restored: HashMap<(bool, bool), Vec<Option<RestoredScan>>>,
}

impl<'a> SeedCache<'a> {
    fn objective(&self, rlt: bool) -> Objective {
        match (rlt, self.lambda) {
            (false, _) => Objective::CrossEntropy,
            (true, Some(l)) => Objective::Rlt(RltParams { lambda: l, ..self.cfg.rlt }),
            (true, None) => Objective::Rlt(self.cfg.rlt),
        }
    }

    /// Tunes lambda on the attacked source once per seed.
    fn ensure_lambda(&mut self) -> Result<()> {
        if self.lambda.is_none() && self.cfg.lambda_budget > 0 {
            self.ensure_attacked()?;
            let scans = self.attacked.clone().unwrap();
            let r = tune_lambda(
                &scans,
                self.cfg.num_classes,
                &self.cfg.pretrain,
                &self.cfg.rlt,
                self.cfg.lambda_epochs,
                self.cfg.lambda_budget,
                self.seed,
            )?;
            self.lambda = Some(r.best_lambda);
        }
        Ok(())
    }

    fn source(&self, attacked: bool) -> &[LabeledCloud] {
        if attacked {
            self.attacked.as_deref().unwrap()
        } else {
            &self.domains.source
        }
    }

    fn ensure_attacked(&mut self) -> Result<()> {
        if self.attacked.is_none() {
            let surrogate = self.model(false, false)?;
            let cfg = AttackConfig {
                seed: rng::substream_seed(self.seed, "attack"),
                ..self.cfg.attack
            };
            let (adv, classes) = attack_sources(&surrogate, &self.domains.source, &cfg)?;
            self.attacked = Some(adv);
            self.attacked_classes = classes;
        }
        Ok(())
    }

    fn model(&mut self, attacked: bool, rlt: bool) -> Result<SegModel> {
        if let Some(m) = self.models.get(&(attacked, rlt)) {
            return Ok(m.clone());
        }
        if attacked {
            self.ensure_attacked()?;
        }
        let obj = self.objective(rlt);
        let m = pretrain(self.source(attacked), self.cfg.num_classes, &self.cfg.pretrain, obj, self.seed)?;
        self.models.insert((attacked, rlt), m.clone());
        Ok(m)
    }

    fn source_scans(&mut self, attacked: bool, rlt: bool, model: &SegModel) -> Result<&Vec<DomainScan>> {
        if !self.source_scans.contains_key(&(attacked, rlt)) {
            let obj = self.objective(rlt);
            let k = self.cfg.adapt.hnpu.k;
            let scans = self
                .source(attacked)
                .iter()
                .map(|c| DomainScan::new(model, c, &obj, k))
                .collect::<Result<_>>()?;
            self.source_scans.insert((attacked, rlt), scans);
        }
        Ok(&self.source_scans[&(attacked, rlt)])
    }

    fn target_scans(&mut self, rlt: bool, model: &SegModel) -> Result<&Vec<DomainScan>> {
        if !self.target_scans.contains_key(&rlt) {
            let obj = self.objective(rlt);
            let k = self.cfg.adapt.hnpu.k;
            let scans = self
                .domains
                .target_adapt
                .iter()
                .map(|c| DomainScan::new(model, c, &obj, k))
                .collect::<Result<_>>()?;
            self.target_scans.insert(rlt, scans);
        }
        Ok(&self.target_scans[&rlt])
    }

    fn subset(&mut self, rlt: bool, model: &SegModel) -> Result<&CleanSubset> {
        if !self.subsets.contains_key(&rlt) {
            let s = clean_subset(
                model,
                &self.domains.source,
                self.cfg.clean_fraction,
                self.cfg.val_fraction,
                &self.objective(rlt),
                rng::substream_seed(self.seed, "clean-subset"),
            )?;
            self.subsets.insert(rlt, s);
        }
        Ok(&self.subsets[&rlt])
    }

    fn decoder(&mut self) -> Result<&DecoderModel> {
        if self.decoder.is_none() {
            self.decoder = Some(train_scene_decoder(&self.domains.source, self.cfg, self.seed)?);
        }
        Ok(self.decoder.as_ref().unwrap())
    }

    fn restored(&mut self, attacked: bool, rlt: bool, model: &SegModel) -> Result<Vec<Option<RestoredScan>>> {
        if !self.restored.contains_key(&(attacked, rlt)) {
            let patch = self.cfg.patch_points;
            let obj = self.objective(rlt);
            let scans: Vec<LabeledCloud> = self.source(attacked).to_vec();
            let decoder = self.decoder()?.clone();
            let out = scans
                .iter()
                .map(|c| {
                    let pts = decoder.restore_scene(c, patch)?;
                    RestoredScan::new(model, pts, &obj).map(Some)
                })
                .collect::<Result<Vec<_>>>()?;
            self.restored.insert((attacked, rlt), out);
        }
        Ok(self.restored[&(attacked, rlt)].clone())
    }

    fn run_cell(&mut self, row: Row) -> Result<(f64, Vec<Option<f64>>)> {
        let t = row.toggles();
        let attacked = row.attacked();
        if t.rlt {
            self.ensure_lambda()?;
        }
        let obj = self.objective(t.rlt);
        let model = self.model(attacked, t.rlt)?;
        let restored = if t.decoder && self.cfg.restore_sources {
            self.restored(attacked, t.rlt, &model)?
        } else {
            Vec::new()
        };
        let sources = self.source_scans(attacked, t.rlt, &model)?.clone();
        let targets = self.target_scans(t.rlt, &model)?.clone();
        let adapt_cfg = AdaptConfig {
            objective: obj,
            use_hnpu: t.decoder && self.cfg.adapt.use_hnpu,
            hnpu_on_source: t.decoder && self.cfg.adapt.hnpu_on_source,
            seed: rng::substream_seed(self.seed, "adapt"),
            ..self.cfg.adapt
        };
        let mut state = AdaptState::new(&model, adapt_cfg.ema_decay, adapt_cfg.mix_ratio, adapt_cfg.hnpu)?;
        adapt(&mut state, &sources, &targets, &restored, &adapt_cfg)?;
        let mut adapted = state.teacher;
        if t.fine_tune {
            let subset = self.subset(t.rlt, &adapted)?.clone();
            let ft_cfg = FineTuneConfig {
                objective: if self.cfg.rlt_in_fine_tune { obj } else { Objective::CrossEntropy },
                seed: rng::substream_seed(self.seed, "fine-tune"),
                ..self.cfg.fine_tune
            };
            adapted = fine_tune(&adapted, &subset, &ft_cfg)?.model;
        }
        let cm = evaluate(&adapted, &self.domains.target_eval)?;
        let m = miou_excluding(&cm, self.cfg.ignore_class)
            .ok_or_else(|| Error::numeric("evaluation", "no class present in predictions or truth"))?;
        Ok((m, iou_per_class(&cm)))
    }
}

/// Runs every configured row for one seed.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedResult> {
    let domains = build_domains(&cfg.data, seed)?;
    let mut cache = SeedCache {
        cfg,
        seed,
        domains,
        attacked: None,
        attacked_classes: BTreeSet::new(),
        models: HashMap::new(),
        source_scans: HashMap::new(),
        target_scans: HashMap::new(),
        subsets: HashMap::new(),
        decoder: None,
        lambda: None,
        restored: HashMap::new(),
    };
    let mut cells = Vec::with_capacity(cfg.rows.len());
    for &row in &cfg.rows {
        let cell = match cache.run_cell(row) {
            Ok((m, per_class)) => CellResult {
                row,
                seed,
                miou: Some(m),
                per_class,
                error: None,
            },
            Err(e) => CellResult {
                row,
                seed,
                miou: None,
                per_class: Vec::new(),
                error: Some(e.to_string()),
            },
        };
        cells.push(cell);
    }
    let shift = match &cache.attacked {
        Some(adv) => Some(distribution_shift_report(
            &label_stats(&cache.domains.source, cfg.num_classes)?,
            &label_stats(adv, cfg.num_classes)?,
        )?),
        None => None,
    };
    Ok(SeedResult {
        seed,
        cells,
        lambda: cache.lambda,
        attacked_classes: cache.attacked_classes,
        shift,
    })
}

/// Runs the full grid over every seed and writes outputs when configured.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let mut seeds = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        seeds.push(match run_seed(cfg, seed) {
            Ok(r) => r,
            Err(e) => SeedResult {
                seed,
                cells: cfg
                    .rows
                    .iter()
                    .map(|&row| CellResult {
                        row,
                        seed,
                        miou: None,
                        per_class: Vec::new(),
                        error: Some(e.to_string()),
                    })
                    .collect(),
                lambda: None,
                attacked_classes: BTreeSet::new(),
                shift: None,
            },
        });
    }
    let result = ExperimentResult {
        scenario: cfg.scenario.clone(),
        num_classes: cfg.num_classes,
        rows: cfg.rows.clone(),
        seeds,
    };
    if let Some(dir) = &cfg.output_dir {
        result.write(dir)?;
    }
    Ok(result)
}
