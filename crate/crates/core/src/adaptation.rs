//! Teacher-student domain adaptation, neighborhood pseudo-label refinement,
//! domain mixing and clean-subset fine-tuning.

use rand::seq::index;

use crate::autodiff::{softmax_rows, AdamHyper, Parameterized, PointFeatures, SegModel};
use crate::cloud::{LabeledCloud, Point3, SpatialIndex};
use crate::error::{Error, Result};
use crate::eval::{confusion_masked, miou, ConfusionMatrix};
use crate::losses::{KeyPointMask, MarginTable};
use crate::rng;
use crate::train::{dataset_stats, Objective, PreparedScan, Trainer};

/// Teacher predictions used as supervision on unlabeled points.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabels {
    pub labels: Vec<u32>,
    /// Max softmax probability of each point.
    pub confidence: Vec<f64>,
    /// Points that participate in losses.
    pub valid: Vec<bool>,
}

impl PseudoLabels {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Labels from per-point probabilities; ties go to the lower class.
    pub fn from_probs(probs: &crate::autodiff::Mat, tau_low: f64) -> Self {
        let mut labels = Vec::with_capacity(probs.nrows());
        let mut confidence = Vec::with_capacity(probs.nrows());
        for row in probs.rows() {
            let (mut best, mut conf) = (0, f64::NEG_INFINITY);
            for (k, &p) in row.iter().enumerate() {
                if p > conf {
                    best = k;
                    conf = p;
                }
            }
            labels.push(best as u32);
            confidence.push(conf.clamp(0.0, 1.0));
        }
        let valid = confidence.iter().map(|&c| c >= tau_low).collect();
        Self {
            labels,
            confidence,
            valid,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HnpuConfig {
    pub k: usize,
    pub tau_high: f64,
    pub tau_low: f64,
    /// Agreeing high-confidence neighbors needed to relabel a point.
    pub quorum: usize,
}

impl Default for HnpuConfig {
    fn default() -> Self {
        Self::with_k(8)
    }
}

impl HnpuConfig {
    /// Default thresholds with quorum `ceil(k / 2)`.
    pub fn with_k(k: usize) -> Self {
        Self {
            k,
            tau_high: 0.9,
            tau_low: 0.6,
            quorum: k.div_ceil(2),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.tau_low && self.tau_low < self.tau_high && self.tau_high <= 1.0) {
            return Err(Error::arg("thresholds must satisfy 0 <= tau_low < tau_high <= 1"));
        }
        if self.quorum < 1 || self.quorum > self.k {
            return Err(Error::arg("quorum must lie in 1..=k"));
        }
        Ok(())
    }
}

/// Cap on the confidence assigned to relabeled points.
pub const UPDATED_CONFIDENCE_CAP: f64 = 0.999;

/// `k` nearest neighbors of every point, excluding the point itself.
pub fn neighbor_lists(index: &SpatialIndex, k: usize) -> Vec<Vec<usize>> {
    index
        .points()
        .iter()
        .enumerate()
        .map(|(i, p)| {
            index
                .knn_unchecked(p, k + 1)
                .into_iter()
                .map(|n| n.ordinal)
                .filter(|&j| j != i)
                .take(k)
                .collect()
        })
        .collect()
}

/// Neighborhood refinement of pseudo-labels.
///
/// Every point below `tau_high` takes the class held by at least `quorum` of
/// its high-confidence neighbors (most votes, lower class on ties), with
/// confidence `min(mean agreeing confidence, 0.999)`. Points without a quorum
/// and below `tau_low` become invalid. Relabeled points that reach
/// `tau_high` are frozen and vote in later rounds; rounds repeat until the
/// high-confidence set stops growing, so a second call changes nothing.
pub fn hnpu_update(pseudo: &PseudoLabels, index: &SpatialIndex, cfg: &HnpuConfig) -> Result<PseudoLabels> {
    cfg.validate()?;
    if index.len() != pseudo.len() {
        return Err(Error::arg("index and pseudo-labels cover different clouds"));
    }
    let neighbors = neighbor_lists(index, cfg.k);
    Ok(hnpu_with_neighbors(pseudo, &neighbors, cfg))
}

/// [`hnpu_update`] with precomputed neighbor lists.
pub fn hnpu_with_neighbors(pseudo: &PseudoLabels, neighbors: &[Vec<usize>], cfg: &HnpuConfig) -> PseudoLabels {
    let num_classes = pseudo.labels.iter().max().map_or(0, |&m| m as usize + 1);
    let mut cur = pseudo.clone();
    let mut votes = vec![0usize; num_classes];
    let mut conf_sum = vec![0.0; num_classes];
    loop {
        let high: Vec<bool> = cur.confidence.iter().map(|&c| c >= cfg.tau_high).collect();
        let mut next = cur.clone();
        for i in 0..cur.len() {
            if high[i] {
                continue;
            }
            votes.iter_mut().for_each(|v| *v = 0);
            conf_sum.iter_mut().for_each(|v| *v = 0.0);
            for &j in &neighbors[i] {
                if high[j] {
                    let c = cur.labels[j] as usize;
                    votes[c] += 1;
                    conf_sum[c] += cur.confidence[j];
                }
            }
            let mut best = 0;
            for c in 1..num_classes {
                if votes[c] > votes[best] {
                    best = c;
                }
            }
            if num_classes > 0 && votes[best] >= cfg.quorum {
                next.labels[i] = best as u32;
                next.confidence[i] = (conf_sum[best] / votes[best] as f64).min(UPDATED_CONFIDENCE_CAP);
                next.valid[i] = true;
            } else {
                next.labels[i] = pseudo.labels[i];
                next.confidence[i] = pseudo.confidence[i];
                next.valid[i] = pseudo.confidence[i] >= cfg.tau_low && pseudo.valid[i];
            }
        }
        let grew = next
            .confidence
            .iter()
            .zip(&high)
            .any(|(&c, &h)| !h && c >= cfg.tau_high);
        cur = next;
        if !grew {
            return cur;
        }
    }
}

/// Student, EMA teacher and adaptation bookkeeping.
#[derive(Debug, Clone)]
pub struct AdaptState {
    pub student: SegModel,
    pub teacher: SegModel,
    pub ema_decay: f64,
    pub iteration: usize,
    pub mix_ratio: f64,
    pub hnpu: HnpuConfig,
    pub trainer: Trainer,
}

impl AdaptState {
    pub fn new(model: &SegModel, ema_decay: f64, mix_ratio: f64, hnpu: HnpuConfig) -> Result<Self> {
        model.validate()?;
        hnpu.validate()?;
        if !(ema_decay > 0.0 && ema_decay <= 1.0) {
            return Err(Error::arg("EMA decay must lie in (0, 1]"));
        }
        if !(mix_ratio > 0.0 && mix_ratio < 1.0) {
            return Err(Error::arg("mixing ratio must lie in (0, 1)"));
        }
        Ok(Self {
            student: model.clone(),
            teacher: model.clone(),
            ema_decay,
            iteration: 0,
            mix_ratio,
            hnpu,
            trainer: Trainer::default(),
        })
    }

    /// `teacher <- decay * teacher + (1 - decay) * student`.
    pub fn update_teacher(&mut self) {
        let d = self.ema_decay;
        for (t, s) in self.teacher.params_mut().into_iter().zip(self.student.params()) {
            for (tv, &sv) in t.data.iter_mut().zip(&s.data) {
                *tv = (d * *tv as f64 + (1.0 - d) * sv as f64) as f32;
            }
        }
    }
}

/// Teacher argmax, confidence and `tau_low` validity.
pub fn teacher_predict(state: &AdaptState, cloud: &LabeledCloud) -> Result<PseudoLabels> {
    predict_features(&state.teacher, &state.teacher.features(cloud), state.hnpu.tau_low)
}

pub fn predict_features(model: &SegModel, feats: &PointFeatures, tau_low: f64) -> Result<PseudoLabels> {
    Ok(PseudoLabels::from_probs(&softmax_rows(&model.forward(feats)?), tau_low))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    /// Point of the scene the mix is based on.
    Base,
    /// Point spliced in from the other domain.
    Donor,
    /// Restored point added by the decoder branch.
    Restored,
}

/// A mixed training scene with supervision and per-point origin.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedScene {
    pub cloud: LabeledCloud,
    pub valid: Vec<bool>,
    pub provenance: Vec<Provenance>,
    /// Row of each point in its originating cloud.
    pub origin: Vec<usize>,
    /// Set when no donor point was available.
    pub degenerate: bool,
}

impl MixedScene {
    fn base(cloud: &LabeledCloud, labels: &[u32], valid: &[bool]) -> Self {
        let mut c = cloud.clone();
        c.labels = labels.to_vec();
        Self {
            cloud: c,
            valid: valid.to_vec(),
            provenance: vec![Provenance::Base; cloud.len()],
            origin: (0..cloud.len()).collect(),
            degenerate: false,
        }
    }

    fn splice(&mut self, donor: &LabeledCloud, labels: &[u32], valid: &[bool], rows: &[usize], kind: Provenance) {
        for &j in rows {
            self.cloud.points.push(donor.points[j]);
            self.cloud.labels.push(labels[j]);
            self.valid.push(valid[j]);
            self.provenance.push(kind);
            self.origin.push(j);
        }
        if let Some(int) = &mut self.cloud.intensity {
            match &donor.intensity {
                Some(d) => int.extend(rows.iter().map(|&j| d[j])),
                None => int.extend(rows.iter().map(|_| 0.0)),
            }
        }
    }

    /// Appends restored points with their fused supervision.
    pub fn add_restored(&mut self, points: &[Point3], labels: &[u32], valid: &[bool]) -> Result<()> {
        if points.len() != labels.len() || points.len() != valid.len() {
            return Err(Error::arg("restored points, labels and mask differ in length"));
        }
        let donor = LabeledCloud::new(points.to_vec(), labels.to_vec())?;
        let rows: Vec<usize> = (0..points.len()).collect();
        self.splice(&donor, labels, valid, &rows, Provenance::Restored);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.cloud.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cloud.is_empty()
    }

    pub fn count(&self, kind: Provenance) -> usize {
        self.provenance.iter().filter(|&&p| p == kind).count()
    }
}

fn sample_donors(candidates: &[usize], count: usize, r: &mut rng::Rng) -> Vec<usize> {
    let count = count.min(candidates.len());
    let mut rows: Vec<usize> = index::sample(r, candidates.len(), count)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    rows.sort_unstable();
    rows
}

/// Builds the source-to-target and target-to-source scenes.
///
/// The first is the target with `round(ratio * |source|)` labeled source
/// points spliced in; the second is the source with `round(ratio * |target|)`
/// valid pseudo-labeled target points spliced in (fewer if not enough are
/// valid).
pub fn mix_domains(
    source: &LabeledCloud,
    target: &LabeledCloud,
    pseudo: &PseudoLabels,
    ratio: f64,
    seed: u64,
) -> Result<(MixedScene, MixedScene)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::arg("mixing ratio must lie in (0, 1)"));
    }
    if pseudo.len() != target.len() {
        return Err(Error::arg("pseudo-labels and target differ in length"));
    }
    let mut r = rng::substream(seed, "mix-domains");
    let all_source: Vec<usize> = (0..source.len()).collect();
    let source_valid = vec![true; source.len()];
    let mut s2t = MixedScene::base(target, &pseudo.labels, &pseudo.valid);
    let rows = sample_donors(&all_source, (ratio * source.len() as f64).round() as usize, &mut r);
    s2t.splice(source, &source.labels, &source_valid, &rows, Provenance::Donor);

    let mut t2s = MixedScene::base(source, &source.labels, &source_valid);
    let valid_target: Vec<usize> = (0..target.len()).filter(|&j| pseudo.valid[j]).collect();
    let rows = sample_donors(&valid_target, (ratio * target.len() as f64).round() as usize, &mut r);
    t2s.degenerate = valid_target.is_empty();
    t2s.splice(target, &pseudo.labels, &pseudo.valid, &rows, Provenance::Donor);
    Ok((s2t, t2s))
}

/// Training rows of a mixed scene gathered from per-domain prepared scans.
///
/// Features and key points of every point come from its originating scan, so
/// scenes can be remixed without recomputing neighborhoods. Restored points
/// come from `restored`, when present.
pub fn prepare_mixed(
    scene: &MixedScene,
    base: &PreparedScan,
    donor: &PreparedScan,
    restored: Option<&PreparedScan>,
) -> Result<PreparedScan> {
    let pick = |kind: Provenance| -> Result<&PreparedScan> {
        match kind {
            Provenance::Base => Ok(base),
            Provenance::Donor => Ok(donor),
            Provenance::Restored => restored.ok_or_else(|| Error::arg("scene has restored points but no restored scan")),
        }
    };
    let n = scene.len();
    let first = pick(scene.provenance.first().copied().unwrap_or(Provenance::Base))?;
    let mut coords = crate::autodiff::Mat::zeros((n, first.feats.coords.ncols()));
    let mut context = crate::autodiff::Mat::zeros((n, first.feats.context.ncols()));
    let mut key = Vec::with_capacity(n);
    for i in 0..n {
        let src = pick(scene.provenance[i])?;
        let j = scene.origin[i];
        if j >= src.len() {
            return Err(Error::arg("mixed scene refers past its originating scan"));
        }
        coords.row_mut(i).assign(&src.feats.coords.row(j));
        context.row_mut(i).assign(&src.feats.context.row(j));
        key.push(src.key.key[j]);
    }
    Ok(PreparedScan {
        feats: PointFeatures { coords, context },
        labels: scene.cloud.labels.clone(),
        valid: Some(scene.valid.clone()),
        key: KeyPointMask {
            key,
            thresholds: base.key.thresholds.clone(),
            top_fraction: base.key.top_fraction,
        },
    })
}

/// One student step on `L(s->t) + L(t->s)` followed by the EMA update.
/// Returns both loss terms.
pub fn adaptation_step(
    state: &mut AdaptState,
    s2t: &PreparedScan,
    t2s: &PreparedScan,
    margins: &MarginTable,
    objective: &Objective,
    hyper: &AdamHyper,
) -> Result<[f64; 2]> {
    let iteration = state.iteration;
    let wrap = |e: Error| Error::Adaptation {
        iteration,
        message: e.to_string(),
    };
    let losses = state
        .trainer
        .step(&mut state.student, &[s2t, t2s], margins, objective, hyper)
        .map_err(wrap)?;
    state.update_teacher();
    state.iteration += 1;
    Ok([losses[0], losses[1]])
}

/// Settings of a full adaptation run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptConfig {
    pub steps: usize,
    pub ema_decay: f64,
    pub mix_ratio: f64,
    /// Points sampled from each mixed scene per step.
    pub batch_points: usize,
    pub objective: Objective,
    pub adam: AdamHyper,
    pub hnpu: HnpuConfig,
    /// Refine target pseudo-labels with neighborhood voting.
    pub use_hnpu: bool,
    /// Refine the (possibly corrupted) source labels the same way.
    pub hnpu_on_source: bool,
    /// Radius of the restored-point label fusion.
    pub fusion_radius: f64,
    /// Steps between teacher pseudo-label refreshes of a scan.
    pub refresh_every: usize,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            ema_decay: 0.99,
            mix_ratio: 0.5,
            batch_points: 2048,
            objective: Objective::CrossEntropy,
            adam: AdamHyper {
                lr: 1e-3,
                ..Default::default()
            },
            hnpu: HnpuConfig::default(),
            use_hnpu: true,
            hnpu_on_source: false,
            fusion_radius: 0.3,
            refresh_every: 1,
            seed: 0,
        }
    }
}

/// A scan with everything adaptation reuses across steps.
#[derive(Debug, Clone)]
pub struct DomainScan {
    pub cloud: LabeledCloud,
    pub prepared: PreparedScan,
    pub neighbors: Vec<Vec<usize>>,
}

impl DomainScan {
    pub fn new(model: &SegModel, cloud: &LabeledCloud, objective: &Objective, k: usize) -> Result<Self> {
        let prepared = PreparedScan::new(model, cloud, objective)?;
        let neighbors = neighbor_lists(&SpatialIndex::build(cloud), k);
        Ok(Self {
            cloud: cloud.clone(),
            prepared,
            neighbors,
        })
    }
}

/// Restored points attached to one source scan.
#[derive(Debug, Clone)]
pub struct RestoredScan {
    pub points: Vec<Point3>,
    pub prepared: PreparedScan,
}

impl RestoredScan {
    pub fn new(model: &SegModel, points: Vec<Point3>, objective: &Objective) -> Result<Self> {
        let cloud = LabeledCloud::new(points.clone(), vec![0; points.len()])?;
        let prepared = PreparedScan::new(model, &cloud, objective)?;
        Ok(Self { points, prepared })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdaptReport {
    /// `[L(s->t), L(t->s)]` per step.
    pub losses: Vec<[f64; 2]>,
    /// Mean valid fraction of refined target pseudo-labels.
    pub valid_fraction: f64,
}

fn refine(pseudo: PseudoLabels, scan: &DomainScan, cfg: &AdaptConfig) -> PseudoLabels {
    if cfg.use_hnpu {
        hnpu_with_neighbors(&pseudo, &scan.neighbors, &cfg.hnpu)
    } else {
        pseudo
    }
}

/// Source labels after optional neighborhood refinement: teacher predictions
/// that agree with the given label keep it; disagreeing points are relabeled
/// by high-confidence neighbors or dropped.
fn source_supervision(state: &AdaptState, scan: &DomainScan, cfg: &AdaptConfig) -> Result<(Vec<u32>, Vec<bool>)> {
    if !cfg.hnpu_on_source {
        return Ok((scan.cloud.labels.clone(), vec![true; scan.cloud.len()]));
    }
    let mut p = predict_features(&state.teacher, &scan.prepared.feats, cfg.hnpu.tau_low)?;
    for i in 0..p.len() {
        if p.labels[i] == scan.cloud.labels[i] {
            p.confidence[i] = p.confidence[i].max(cfg.hnpu.tau_high);
            p.valid[i] = true;
        } else {
            p.labels[i] = scan.cloud.labels[i];
            p.confidence[i] = 0.0;
            p.valid[i] = false;
        }
    }
    let refined = hnpu_with_neighbors(&p, &scan.neighbors, &cfg.hnpu);
    Ok((refined.labels, refined.valid))
}

/// Runs `cfg.steps` adaptation steps, cycling through scan pairs.
///
/// Each step recomputes teacher pseudo-labels on the current target scan,
/// mixes it with the current source scan, and when `restored` holds an entry
/// for the source scan adds its points to the target-to-source scene with
/// fused labels.
pub fn adapt(
    state: &mut AdaptState,
    sources: &[DomainScan],
    targets: &[DomainScan],
    restored: &[Option<RestoredScan>],
    cfg: &AdaptConfig,
) -> Result<AdaptReport> {
    if sources.is_empty() || targets.is_empty() {
        return Err(Error::arg("adaptation needs source and target scans"));
    }
    if !restored.is_empty() && restored.len() != sources.len() {
        return Err(Error::arg("restored scans must match source scans"));
    }
    let c = state.student.num_classes;
    let source_prepared: Vec<PreparedScan> = sources.iter().map(|s| s.prepared.clone()).collect();
    let margins = cfg.objective.margins(&dataset_stats(&source_prepared, c)?)?;
    let mut r = rng::substream(cfg.seed, "adapt-batches");
    let mut report = AdaptReport::default();
    let mut valid_sum = 0.0;
    let refresh = cfg.refresh_every.max(1);
    let mut target_cache: Vec<Option<(usize, PseudoLabels)>> = vec![None; targets.len()];
    let mut source_cache: Vec<Option<(usize, (Vec<u32>, Vec<bool>))>> = vec![None; sources.len()];
    for step in 0..cfg.steps {
        let si = step % sources.len();
        let ti = step % targets.len();
        let (src, tgt) = (&sources[si], &targets[ti]);
        if target_cache[ti].as_ref().is_none_or(|(at, _)| step - at >= refresh) {
            let p = predict_features(&state.teacher, &tgt.prepared.feats, cfg.hnpu.tau_low)?;
            target_cache[ti] = Some((step, refine(p, tgt, cfg)));
        }
        if source_cache[si].as_ref().is_none_or(|(at, _)| step - at >= refresh) {
            source_cache[si] = Some((step, source_supervision(state, src, cfg)?));
        }
        let pseudo = &target_cache[ti].as_ref().unwrap().1;
        valid_sum += pseudo.valid_count() as f64 / pseudo.len().max(1) as f64;
        let (src_labels, src_valid) = source_cache[si].as_ref().unwrap().1.clone();
        let mut src_cloud = src.cloud.clone();
        src_cloud.labels = src_labels.clone();
        let mix_seed = rng::substream_seed(cfg.seed, &format!("mix/{step}"));
        let (s2t, mut t2s) = mix_domains(&src_cloud, &tgt.cloud, pseudo, cfg.mix_ratio, mix_seed)?;
        for i in 0..t2s.len() {
            if t2s.provenance[i] == Provenance::Base {
                t2s.valid[i] = src_valid[t2s.origin[i]];
            }
        }
        let s2t_ok: Vec<bool> = s2t
            .provenance
            .iter()
            .zip(&s2t.origin)
            .map(|(&p, &j)| p != Provenance::Donor || src_valid[j])
            .collect();
        let mut s2t = s2t;
        for (v, ok) in s2t.valid.iter_mut().zip(s2t_ok) {
            *v &= ok;
        }
        let restored_scan = restored.get(si).and_then(|x| x.as_ref());
        if let Some(rs) = restored_scan {
            let (labels, valid) = crate::decoder::fuse_labels(
                &rs.points,
                &src.cloud.points,
                &src_labels,
                &src_valid,
                cfg.fusion_radius,
            )?;
            t2s.add_restored(&rs.points, &labels, &valid)?;
        }
        let s2t_prep = prepare_mixed(&s2t, &tgt.prepared, &src.prepared, None)?;
        let t2s_prep = prepare_mixed(&t2s, &src.prepared, &tgt.prepared, restored_scan.map(|x| &x.prepared))?;
        let b1 = s2t_prep.batch(&batch_rows(&s2t_prep, cfg.batch_points, &mut r));
        let b2 = t2s_prep.batch(&batch_rows(&t2s_prep, cfg.batch_points, &mut r));
        report
            .losses
            .push(adaptation_step(state, &b1, &b2, &margins, &cfg.objective, &cfg.adam)?);
    }
    report.valid_fraction = valid_sum / cfg.steps.max(1) as f64;
    Ok(report)
}

fn batch_rows(scan: &PreparedScan, k: usize, r: &mut rng::Rng) -> Vec<usize> {
    let n = scan.len();
    if n <= k {
        return (0..n).collect();
    }
    let mut rows: Vec<usize> = index::sample(r, n, k).into_iter().collect();
    rows.sort_unstable();
    rows
}

/// Validation/training split of a clean labeled subset.
#[derive(Debug, Clone)]
pub struct CleanSubset {
    pub train: Vec<PreparedScan>,
    pub val: Vec<PreparedScan>,
}

/// Samples `fraction` of the points of every clean scan (features come from
/// the full scan) and splits them into training and validation rows.
pub fn clean_subset(
    model: &SegModel,
    scans: &[LabeledCloud],
    fraction: f64,
    val_fraction: f64,
    objective: &Objective,
    seed: u64,
) -> Result<CleanSubset> {
    if !(fraction > 0.0 && fraction <= 1.0) || !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::arg("subset fractions out of range"));
    }
    let mut out = CleanSubset {
        train: Vec::new(),
        val: Vec::new(),
    };
    for (i, cloud) in scans.iter().enumerate() {
        let full = PreparedScan::new(model, cloud, objective)?;
        let mut r = rng::indexed(seed, "clean-subset", i as u64);
        let take = ((fraction * cloud.len() as f64).round() as usize).min(cloud.len());
        let mut rows: Vec<usize> = index::sample(&mut r, cloud.len(), take).into_iter().collect();
        let n_val = (val_fraction * take as f64).round() as usize;
        let val_rows = rows.split_off(take - n_val);
        rows.sort_unstable();
        let mut val_rows = val_rows;
        val_rows.sort_unstable();
        if !rows.is_empty() {
            out.train.push(full.batch(&rows));
        }
        if !val_rows.is_empty() {
            out.val.push(full.batch(&val_rows));
        }
    }
    Ok(out)
}

/// Patience-based stopping on a score that should increase.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<f64>,
    /// 1-based epoch of the best score.
    pub best_epoch: usize,
    pub epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            best_epoch: 0,
            epoch: 0,
            stale: 0,
        }
    }

    /// Records one epoch's score. Returns `(improved, stop)`.
    pub fn observe(&mut self, score: f64) -> (bool, bool) {
        self.epoch += 1;
        let improved = self.best.is_none_or(|b| score > b);
        if improved {
            self.best = Some(score);
            self.best_epoch = self.epoch;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        (improved, self.stale >= self.patience)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FineTuneConfig {
    pub max_epochs: usize,
    pub patience: usize,
    /// Trailing layers left trainable.
    pub trainable_layers: usize,
    pub batch_points: usize,
    pub steps_per_scan: usize,
    pub objective: Objective,
    pub adam: AdamHyper,
    pub seed: u64,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self {
            max_epochs: 30,
            patience: 3,
            trainable_layers: 2,
            batch_points: 512,
            steps_per_scan: 2,
            objective: Objective::CrossEntropy,
            adam: AdamHyper {
                lr: 2e-3,
                ..Default::default()
            },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FineTuneReport {
    pub model: SegModel,
    pub val_miou: Vec<f64>,
    pub best_epoch: usize,
}

/// Validation mIoU of `model` over prepared scans.
pub fn prepared_miou(model: &SegModel, scans: &[PreparedScan]) -> Result<f64> {
    let mut cm = ConfusionMatrix::new(model.num_classes);
    for s in scans {
        let pred = model.predict(&s.feats)?;
        cm.merge(&confusion_masked(&pred, &s.labels, s.valid.as_deref(), model.num_classes)?)?;
    }
    Ok(miou(&cm).unwrap_or(0.0))
}

/// Fine-tunes the last layers on a clean subset with early stopping and
/// returns the best-validation weights.
pub fn fine_tune(model: &SegModel, subset: &CleanSubset, cfg: &FineTuneConfig) -> Result<FineTuneReport> {
    if subset.train.iter().all(|s| s.is_empty()) || subset.val.iter().all(|s| s.is_empty()) {
        return Err(Error::arg("clean subset is empty"));
    }
    let mut m = model.clone();
    m.freeze_all_but_last(cfg.trainable_layers);
    let margins = cfg.objective.margins(&dataset_stats(&subset.train, m.num_classes)?)?;
    let mut trainer = Trainer::default();
    let mut r = rng::substream(cfg.seed, "fine-tune");
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = m.clone();
    let mut history = Vec::new();
    for epoch in 0..cfg.max_epochs {
        for scan in subset.train.iter().filter(|s| !s.is_empty()) {
            for _ in 0..cfg.steps_per_scan {
                let rows = batch_rows(scan, cfg.batch_points, &mut r);
                trainer
                    .step(&mut m, &[&scan.batch(&rows)], &margins, &cfg.objective, &cfg.adam)
                    .map_err(|e| Error::Training {
                        epoch,
                        message: e.to_string(),
                    })?;
            }
        }
        let score = prepared_miou(&m, &subset.val)?;
        history.push(score);
        let (improved, stop) = stopper.observe(score);
        if improved {
            best = m.clone();
        }
        if stop {
            break;
        }
    }
    for (b, orig) in best.layers.iter_mut().zip(&model.layers) {
        b.set_frozen(orig.is_frozen());
    }
    Ok(FineTuneReport {
        model: best,
        val_miou: history,
        best_epoch: stopper.best_epoch,
    })
}
