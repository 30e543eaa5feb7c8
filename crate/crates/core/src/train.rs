//! Supervised training of the segmentation network.

use crate::autodiff::{adam_step, sample_rows, AdamHyper, AdamState, PointFeatures, Recorded, SegModel, Tape, Var};
use crate::cloud::{class_histogram, geometric_importance, ClassStats, LabeledCloud};
use crate::error::{Error, Result};
use crate::losses::{
    cross_entropy_on_tape, dynamic_margins, key_point_mask, kps_on_tape, rlt_on_tape, soft_dice_on_tape,
    KeyPointMask, MarginTable, DEFAULT_KPS_SCALE, DEFAULT_MARGIN_EXPONENT, DEFAULT_MAX_MARGIN,
};
use crate::rng;

/// Settings of the blended key-point/SoftDice objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RltParams {
    pub lambda: f64,
    /// Fraction of each class flagged as key points.
    pub top_fraction: f64,
    pub scale: f64,
    pub margin_exponent: f64,
    pub max_margin: f64,
    /// Neighborhood size of the importance score.
    pub importance_k: usize,
}

impl Default for RltParams {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            top_fraction: 0.2,
            scale: DEFAULT_KPS_SCALE,
            margin_exponent: DEFAULT_MARGIN_EXPONENT,
            max_margin: DEFAULT_MAX_MARGIN,
            importance_k: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    CrossEntropy,
    Rlt(RltParams),
}

impl Objective {
    pub fn margins(&self, stats: &ClassStats) -> Result<MarginTable> {
        match self {
            Objective::CrossEntropy => Ok(MarginTable::zeros(stats.num_classes)),
            Objective::Rlt(p) => dynamic_margins(stats, p.margin_exponent, p.max_margin),
        }
    }
}

/// A scan with its features and supervision precomputed.
#[derive(Debug, Clone)]
pub struct PreparedScan {
    pub feats: PointFeatures,
    pub labels: Vec<u32>,
    /// Points excluded from every loss are `false`.
    pub valid: Option<Vec<bool>>,
    pub key: KeyPointMask,
}

impl PreparedScan {
    pub fn new(model: &SegModel, cloud: &LabeledCloud, objective: &Objective) -> Result<Self> {
        Self::with_labels(model, cloud, cloud.labels.clone(), None, objective)
    }

    pub fn with_labels(
        model: &SegModel,
        cloud: &LabeledCloud,
        labels: Vec<u32>,
        valid: Option<Vec<bool>>,
        objective: &Objective,
    ) -> Result<Self> {
        if labels.len() != cloud.len() || valid.as_ref().is_some_and(|v| v.len() != cloud.len()) {
            return Err(Error::arg("supervision length differs from point count"));
        }
        if let Some(j) = labels.iter().position(|&l| l as usize >= model.num_classes) {
            return Err(Error::Data {
                ordinal: j,
                message: format!("label {} outside the model's {} classes", labels[j], model.num_classes),
            });
        }
        let key = match objective {
            Objective::Rlt(p) if cloud.len() > p.importance_k => {
                let imp = geometric_importance(cloud, p.importance_k)?;
                key_point_mask(&imp, &labels, p.top_fraction)?
            }
            _ => KeyPointMask::empty(cloud.len()),
        };
        Ok(Self {
            feats: model.features(cloud),
            labels,
            valid,
            key,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows `rows` of this scan.
    pub fn batch(&self, rows: &[usize]) -> Self {
        Self {
            feats: self.feats.select(rows),
            labels: rows.iter().map(|&j| self.labels[j]).collect(),
            valid: self.valid.as_ref().map(|v| rows.iter().map(|&j| v[j]).collect()),
            key: KeyPointMask {
                key: rows.iter().map(|&j| self.key.key[j]).collect(),
                thresholds: self.key.thresholds.clone(),
                top_fraction: self.key.top_fraction,
            },
        }
    }

    /// Class counts over valid points.
    pub fn stats(&self, num_classes: usize) -> Result<ClassStats> {
        let labels: Vec<u32> = match &self.valid {
            Some(v) => self.labels.iter().zip(v).filter(|p| *p.1).map(|p| *p.0).collect(),
            None => self.labels.clone(),
        };
        class_histogram(&labels, num_classes)
    }
}

/// Class counts summed over scans.
pub fn dataset_stats(scans: &[PreparedScan], num_classes: usize) -> Result<ClassStats> {
    let mut total = ClassStats::from_counts(vec![0; num_classes]);
    for s in scans {
        total = total.merge(&s.stats(num_classes)?)?;
    }
    Ok(total)
}

/// Records the objective for `batch` on an existing forward pass.
pub fn objective_on_tape(
    tape: &mut Tape,
    logits: Var,
    batch: &PreparedScan,
    margins: &MarginTable,
    objective: &Objective,
) -> Result<Var> {
    let valid = batch.valid.as_deref();
    match objective {
        Objective::CrossEntropy => cross_entropy_on_tape(tape, logits, &batch.labels, valid),
        Objective::Rlt(p) => {
            let kps = kps_on_tape(tape, logits, &batch.labels, &batch.key, margins, p.scale, valid)?;
            let sd = soft_dice_on_tape(tape, logits, &batch.labels, valid)?;
            rlt_on_tape(tape, p.lambda, kps, sd)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Points sampled per optimizer step.
    pub batch_points: usize,
    /// Optimizer steps per scan per epoch.
    pub steps_per_scan: usize,
    pub adam: AdamHyper,
    pub objective: Objective,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_points: 2048,
            steps_per_scan: 1,
            adam: AdamHyper {
                lr: 5e-3,
                ..Default::default()
            },
            objective: Objective::CrossEntropy,
            seed: 0,
        }
    }
}

/// Optimizer state that persists across calls.
#[derive(Debug, Clone, Default)]
pub struct Trainer {
    pub adam: AdamState,
}

impl Trainer {
    /// One optimizer step on the sum of the objectives of `batches`.
    /// Returns the individual loss values.
    pub fn step(
        &mut self,
        model: &mut SegModel,
        batches: &[&PreparedScan],
        margins: &MarginTable,
        objective: &Objective,
        hyper: &AdamHyper,
    ) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let mut recs: Vec<Recorded> = Vec::with_capacity(batches.len());
        let mut terms = Vec::with_capacity(batches.len());
        for b in batches {
            let rec = model.record(&mut tape, &b.feats, true, false)?;
            terms.push(objective_on_tape(&mut tape, rec.logits, b, margins, objective)?);
            recs.push(rec);
        }
        let values: Vec<f64> = terms.iter().map(|&t| tape.scalar(t)).collect();
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("loss term {bad}"), "non-finite loss"));
        }
        let mut total = terms[0];
        for &t in &terms[1..] {
            total = tape.add(total, t);
        }
        let grads = tape.backward(total)?;
        let mut g = model.param_grads(&recs[0], &grads);
        for rec in &recs[1..] {
            for (acc, more) in g.iter_mut().zip(model.param_grads(rec, &grads)) {
                *acc += &more;
            }
        }
        adam_step(model, &g, &mut self.adam, hyper)?;
        Ok(values)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    /// Mean loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Mini-batch Adam training over prepared scans.
pub fn train_segmentation(model: &mut SegModel, scans: &[PreparedScan], cfg: &TrainConfig) -> Result<TrainReport> {
    if scans.iter().all(|s| s.is_empty()) {
        return Err(Error::arg("no training points"));
    }
    model.validate()?;
    let margins = cfg.objective.margins(&dataset_stats(scans, model.num_classes)?)?;
    let mut trainer = Trainer::default();
    let mut report = TrainReport::default();
    let mut r = rng::substream(cfg.seed, "train-batches");
    for epoch in 0..cfg.epochs {
        let mut sum = 0.0;
        let mut steps = 0;
        for scan in scans.iter().filter(|s| !s.is_empty()) {
            for _ in 0..cfg.steps_per_scan {
                let rows = sample_rows(scan.len(), cfg.batch_points, &mut r);
                let batch = scan.batch(&rows);
                let loss = trainer
                    .step(model, &[&batch], &margins, &cfg.objective, &cfg.adam)
                    .map_err(|e| Error::Training {
                        epoch,
                        message: e.to_string(),
                    })?;
                sum += loss[0];
                steps += 1;
            }
        }
        report.epoch_losses.push(sum / steps as f64);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::SceneSpec;
    use crate::cloud::synth_scene;

    #[test]
    fn training_reduces_loss_for_both_objectives() {
        let cloud = synth_scene(&SceneSpec::source(3000, 1)).unwrap();
        for objective in [Objective::CrossEntropy, Objective::Rlt(RltParams::default())] {
            let mut model = SegModel::default_for(8, 2);
            let scans = vec![PreparedScan::new(&model, &cloud, &objective).unwrap()];
            let cfg = TrainConfig {
                epochs: 30,
                batch_points: 1024,
                objective,
                ..Default::default()
            };
            let rep = train_segmentation(&mut model, &scans, &cfg).unwrap();
            assert_eq!(rep.epoch_losses.len(), 30);
            let head: f64 = rep.epoch_losses[..5].iter().sum();
            let tail: f64 = rep.epoch_losses[25..].iter().sum();
            assert!(tail < head, "{objective:?}: {:?}", rep.epoch_losses);
        }
    }

    #[test]
    fn invalid_points_do_not_contribute() {
        let cloud = synth_scene(&SceneSpec::source(600, 3)).unwrap();
        let model = SegModel::default_for(8, 4);
        let obj = Objective::Rlt(RltParams::default());
        let valid: Vec<bool> = (0..cloud.len()).map(|j| j % 3 != 0).collect();
        let scan = PreparedScan::with_labels(&model, &cloud, cloud.labels.clone(), Some(valid.clone()), &obj).unwrap();
        let margins = obj.margins(&scan.stats(8).unwrap()).unwrap();
        let loss = |s: &PreparedScan| {
            let mut t = Tape::new();
            let rec = model.record(&mut t, &s.feats, false, false).unwrap();
            let logits = t.value(rec.logits).clone();
            let mut t2 = Tape::new();
            let z = t2.constant(logits);
            let l = objective_on_tape(&mut t2, z, s, &margins, &obj).unwrap();
            t2.scalar(l)
        };
        let base = loss(&scan);
        // corrupting the labels of invalid points changes nothing
        let mut other = scan.clone();
        for j in 0..other.len() {
            if !valid[j] {
                other.labels[j] = (other.labels[j] + 1) % 8;
            }
        }
        assert!((loss(&other) - base).abs() < 1e-12);
    }
}
