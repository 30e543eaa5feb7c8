//! Training objectives.
//!
//! Every loss exists as a plain function on values and as a fused tape
//! operation with a hand-written adjoint. The tape versions share their
//! forward arithmetic with the plain versions, so the two agree bitwise.

use std::collections::BTreeMap;
use std::rc::Rc;

use ndarray::Array2;

use crate::autodiff::{Cache, FusedOp, Mat, Tape, Var};
use crate::cloud::{distance_sq, ClassStats, Point3, SpatialIndex};
use crate::error::{Error, Result};

/// Smoothing constant of the SoftDice ratio.
pub const DICE_EPS: f64 = 1e-7;
pub const DEFAULT_KPS_SCALE: f64 = 10.0;
pub const DEFAULT_MARGIN_EXPONENT: f64 = 0.25;
pub const DEFAULT_MAX_MARGIN: f64 = 0.5;

/// Per-class logit offsets for the key-point margin loss.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginTable {
    pub margins: Vec<f64>,
    pub exponent: f64,
    pub max_margin: f64,
}

impl MarginTable {
    pub fn zeros(num_classes: usize) -> Self {
        Self {
            margins: vec![0.0; num_classes],
            exponent: 0.0,
            max_margin: 0.0,
        }
    }
}

/// Key-point flags plus the per-class importance cut-off that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyPointMask {
    pub key: Vec<bool>,
    /// Lowest importance admitted per class; `None` for absent classes.
    pub thresholds: Vec<Option<f64>>,
    pub top_fraction: f64,
}

impl KeyPointMask {
    pub fn empty(n: usize) -> Self {
        Self {
            key: vec![false; n],
            thresholds: Vec::new(),
            top_fraction: 0.0,
        }
    }

    pub fn count(&self) -> usize {
        self.key.iter().filter(|&&k| k).count()
    }
}

/// Diagonal Gaussian given by its mean and standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGaussian {
    pub mean: Vec<f64>,
    pub deviation: Vec<f64>,
}

impl LatentGaussian {
    pub fn new(mean: Vec<f64>, deviation: Vec<f64>) -> Result<Self> {
        if mean.len() != deviation.len() {
            return Err(Error::arg("mean and deviation lengths differ"));
        }
        if let Some(i) = deviation.iter().position(|&d| !(d > 0.0)) {
            return Err(Error::arg(format!(
                "deviation {i} is {} (must be positive)",
                deviation[i]
            )));
        }
        Ok(Self { mean, deviation })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            deviation: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn check_labels(logits: &Mat, labels: &[u32]) -> Result<()> {
    if logits.nrows() != labels.len() {
        return Err(Error::arg(format!(
            "{} logit rows but {} labels",
            logits.nrows(),
            labels.len()
        )));
    }
    let c = logits.ncols();
    if let Some(i) = labels.iter().position(|&l| l as usize >= c) {
        return Err(Error::Data {
            ordinal: i,
            message: format!("label {} outside 0..{c}", labels[i]),
        });
    }
    Ok(())
}

fn check_valid(valid: Option<&[bool]>, n: usize) -> Result<()> {
    match valid {
        Some(v) if v.len() != n => Err(Error::arg(format!("mask has {} entries, expected {n}", v.len()))),
        _ => Ok(()),
    }
}

/// Row-wise margin softmax: `z' = scale * z - shift * onehot(label)`.
/// Returns the per-row loss `lse(z') - z'_y` and the softmax of `z'`.
fn margin_ce_rows(logits: &Mat, labels: &[u32], scale: &[f64], shift: &[f64]) -> (Vec<f64>, Mat) {
    let (n, c) = logits.dim();
    let mut probs = Mat::zeros((n, c));
    let mut losses = Vec::with_capacity(n);
    for j in 0..n {
        let y = labels[j] as usize;
        let z = |k: usize| scale[j] * logits[[j, k]] - if k == y { shift[j] } else { 0.0 };
        let max = (0..c).map(z).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for k in 0..c {
            let e = (z(k) - max).exp();
            probs[[j, k]] = e;
            sum += e;
        }
        for k in 0..c {
            probs[[j, k]] /= sum;
        }
        losses.push(max + sum.ln() - z(y));
    }
    (losses, probs)
}

fn weighted_mean(values: &[f64], valid: Option<&[bool]>) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (j, v) in values.iter().enumerate() {
        if valid.is_none_or(|m| m[j]) {
            sum += v;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Mean cross-entropy of softmax(logits) against integer labels.
pub fn cross_entropy(logits: &Mat, labels: &[u32]) -> Result<f64> {
    cross_entropy_masked(logits, labels, None)
}

/// Cross-entropy averaged over points whose mask entry is set; 0 when none are.
pub fn cross_entropy_masked(logits: &Mat, labels: &[u32], valid: Option<&[bool]>) -> Result<f64> {
    check_labels(logits, labels)?;
    check_valid(valid, labels.len())?;
    let n = labels.len();
    let (rows, _) = margin_ce_rows(logits, labels, &vec![1.0; n], &vec![0.0; n]);
    Ok(weighted_mean(&rows, valid))
}

/// Per-point cross-entropy (no reduction).
pub fn per_point_cross_entropy(logits: &Mat, labels: &[u32]) -> Result<Vec<f64>> {
    check_labels(logits, labels)?;
    let n = labels.len();
    Ok(margin_ce_rows(logits, labels, &vec![1.0; n], &vec![0.0; n]).0)
}

struct DiceTerms {
    present: Vec<usize>,
    inter: Vec<f64>,
    pred_sq: Vec<f64>,
    truth: Vec<f64>,
}

fn dice_terms(probs: &Mat, labels: &[u32], valid: Option<&[bool]>) -> DiceTerms {
    let c = probs.ncols();
    let mut inter = vec![0.0; c];
    let mut pred_sq = vec![0.0; c];
    let mut truth = vec![0.0; c];
    for (j, &y) in labels.iter().enumerate() {
        if !valid.is_none_or(|m| m[j]) {
            continue;
        }
        let y = y as usize;
        for k in 0..c {
            pred_sq[k] += probs[[j, k]] * probs[[j, k]];
        }
        inter[y] += probs[[j, y]];
        truth[y] += 1.0;
    }
    let present = (0..c).filter(|&k| truth[k] > 0.0).collect();
    DiceTerms {
        present,
        inter,
        pred_sq,
        truth,
    }
}

fn dice_value(t: &DiceTerms) -> f64 {
    if t.present.is_empty() {
        return 0.0;
    }
    let mean = t
        .present
        .iter()
        .map(|&k| (2.0 * t.inter[k] + DICE_EPS) / (t.pred_sq[k] + t.truth[k] + DICE_EPS))
        .sum::<f64>()
        / t.present.len() as f64;
    1.0 - mean
}

/// SoftDice loss: one minus the mean per-class soft Dice ratio over the
/// classes present in `labels`.
pub fn soft_dice(probs: &Mat, labels: &[u32]) -> Result<f64> {
    soft_dice_masked(probs, labels, None)
}

pub fn soft_dice_masked(probs: &Mat, labels: &[u32], valid: Option<&[bool]>) -> Result<f64> {
    check_labels(probs, labels)?;
    check_valid(valid, labels.len())?;
    Ok(dice_value(&dice_terms(probs, labels, valid)))
}

/// Flags the `ceil(top_fraction * n_c)` most important points of every class.
/// Ties go to the lower ordinal.
pub fn key_point_mask(importance: &[f64], labels: &[u32], top_fraction: f64) -> Result<KeyPointMask> {
    if importance.len() != labels.len() {
        return Err(Error::arg("importance and labels differ in length"));
    }
    if !(top_fraction > 0.0 && top_fraction <= 1.0) {
        return Err(Error::arg(format!("top_fraction {top_fraction} outside (0, 1]")));
    }
    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (j, &y) in labels.iter().enumerate() {
        by_class.entry(y).or_default().push(j);
    }
    let num_classes = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
    let mut key = vec![false; labels.len()];
    let mut thresholds = vec![None; num_classes];
    for (y, mut members) in by_class {
        members.sort_by(|&a, &b| importance[b].total_cmp(&importance[a]).then(a.cmp(&b)));
        let take = ((top_fraction * members.len() as f64).ceil() as usize).min(members.len());
        for &j in &members[..take] {
            key[j] = true;
        }
        thresholds[y as usize] = members[..take].last().map(|&j| importance[j]);
    }
    Ok(KeyPointMask {
        key,
        thresholds,
        top_fraction,
    })
}

/// `m_y = max_margin * (n_y / n_min)^(-exponent)`; absent classes get `max_margin`.
pub fn dynamic_margins(stats: &ClassStats, exponent: f64, max_margin: f64) -> Result<MarginTable> {
    if !(exponent >= 0.0) || !(max_margin >= 0.0) {
        return Err(Error::arg("exponent and max_margin must be non-negative"));
    }
    let n_min = stats
        .counts
        .iter()
        .copied()
        .filter(|&n| n > 0)
        .min()
        .ok_or_else(|| Error::arg("all class counts are zero"))?;
    let margins = stats
        .counts
        .iter()
        .map(|&n| {
            if n == 0 {
                max_margin
            } else {
                max_margin * (n as f64 / n_min as f64).powf(-exponent)
            }
        })
        .collect();
    Ok(MarginTable {
        margins,
        exponent,
        max_margin,
    })
}

fn kps_rows(mask: &KeyPointMask, labels: &[u32], margins: &MarginTable, scale: f64) -> (Vec<f64>, Vec<f64>) {
    labels
        .iter()
        .zip(&mask.key)
        .map(|(&y, &k)| {
            if k {
                (scale, scale * margins.margins[y as usize])
            } else {
                (1.0, 0.0)
            }
        })
        .unzip()
}

fn check_kps(logits: &Mat, labels: &[u32], mask: &KeyPointMask, margins: &MarginTable) -> Result<()> {
    check_labels(logits, labels)?;
    if mask.key.len() != labels.len() {
        return Err(Error::arg("key mask length differs from label count"));
    }
    if margins.margins.len() != logits.ncols() {
        return Err(Error::arg("margin table size differs from class count"));
    }
    Ok(())
}

/// Key-point margin cross-entropy: at key points the target logit becomes
/// `s (z_y - m_y)` and the others `s z_k`; remaining points use plain
/// cross-entropy. Mean over points.
pub fn kps_loss(
    logits: &Mat,
    labels: &[u32],
    mask: &KeyPointMask,
    margins: &MarginTable,
    scale: f64,
) -> Result<f64> {
    kps_loss_masked(logits, labels, mask, margins, scale, None)
}

pub fn kps_loss_masked(
    logits: &Mat,
    labels: &[u32],
    mask: &KeyPointMask,
    margins: &MarginTable,
    scale: f64,
    valid: Option<&[bool]>,
) -> Result<f64> {
    check_kps(logits, labels, mask, margins)?;
    check_valid(valid, labels.len())?;
    let (sc, sh) = kps_rows(mask, labels, margins, scale);
    Ok(weighted_mean(&margin_ce_rows(logits, labels, &sc, &sh).0, valid))
}

/// `lambda * kps + (1 - lambda) * sd`.
pub fn rlt_loss(lambda: f64, kps: f64, sd: f64) -> Result<f64> {
    check_lambda(lambda)?;
    Ok(lambda * kps + (1.0 - lambda) * sd)
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::arg(format!("lambda {lambda} outside [0, 1]")));
    }
    Ok(())
}

fn check_sets(x: &[Point3], y: &[Point3]) -> Result<()> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::arg("chamfer distance needs two non-empty sets"));
    }
    Ok(())
}

fn nearest(from: &[Point3], index: &SpatialIndex) -> Vec<(usize, f64)> {
    from.iter()
        .map(|p| {
            let n = index.knn_unchecked(p, 1)[0].ordinal;
            (n, distance_sq(p, &index.points()[n]))
        })
        .collect()
}

fn mean_sq(pairs: &[(usize, f64)]) -> f64 {
    pairs.iter().map(|p| p.1).sum::<f64>() / pairs.len() as f64
}

/// Symmetric Chamfer distance with squared distances and mean reduction.
pub fn chamfer(x: &[Point3], y: &[Point3]) -> Result<f64> {
    check_sets(x, y)?;
    let ab = nearest(x, &SpatialIndex::from_points(y));
    let ba = nearest(y, &SpatialIndex::from_points(x));
    Ok(mean_sq(&ab) + mean_sq(&ba))
}

fn kl_term(mq: f64, sq: f64, mp: f64, sp: f64) -> f64 {
    (sp / sq).ln() + (sq * sq + (mq - mp) * (mq - mp)) / (2.0 * sp * sp) - 0.5
}

/// `KL(post || prior)` summed over dimensions.
pub fn kl_diag_gaussian(post: &LatentGaussian, prior: &LatentGaussian) -> Result<f64> {
    if post.dim() != prior.dim() {
        return Err(Error::arg("latent dimensions differ"));
    }
    for g in [post, prior] {
        if g.deviation.iter().any(|&d| !(d > 0.0)) {
            return Err(Error::arg("deviations must be positive"));
        }
    }
    Ok((0..post.dim())
        .map(|i| kl_term(post.mean[i], post.deviation[i], prior.mean[i], prior.deviation[i]))
        .sum())
}

// ---- tape operations ----

fn scalar(v: f64) -> Mat {
    Array2::from_elem((1, 1), v)
}

struct MarginCe {
    labels: Rc<[u32]>,
    scale: Vec<f64>,
    shift: Vec<f64>,
    valid: Option<Rc<[bool]>>,
}

impl FusedOp for MarginCe {
    fn name(&self) -> &'static str {
        "margin_cross_entropy"
    }

    fn forward(&self, inputs: &[&Mat]) -> (Mat, Option<Cache>) {
        let (rows, probs) = margin_ce_rows(inputs[0], &self.labels, &self.scale, &self.shift);
        let v = weighted_mean(&rows, self.valid.as_deref());
        (scalar(v), Some(Box::new(probs)))
    }

    fn backward(&self, _: &[&Mat], _: &Mat, cache: Option<&Cache>, grad: &Mat) -> Vec<Option<Mat>> {
        let mut d = cache.unwrap().downcast_ref::<Mat>().unwrap().clone();
        let valid = self.valid.as_deref();
        let count = (0..self.labels.len()).filter(|&j| valid.is_none_or(|m| m[j])).count();
        let g = if count == 0 { 0.0 } else { grad[[0, 0]] / count as f64 };
        for (j, mut row) in d.rows_mut().into_iter().enumerate() {
            if !valid.is_none_or(|m| m[j]) {
                row.fill(0.0);
                continue;
            }
            row[self.labels[j] as usize] -= 1.0;
            row *= g * self.scale[j];
        }
        vec![Some(d)]
    }
}

/// Mean cross-entropy node.
pub fn cross_entropy_on_tape(tape: &mut Tape, logits: Var, labels: &[u32], valid: Option<&[bool]>) -> Result<Var> {
    check_labels(tape.value(logits), labels)?;
    check_valid(valid, labels.len())?;
    let n = labels.len();
    let op = MarginCe {
        labels: labels.into(),
        scale: vec![1.0; n],
        shift: vec![0.0; n],
        valid: valid.map(Into::into),
    };
    Ok(tape.fused(Rc::new(op), &[logits]))
}

/// Key-point margin loss node.
pub fn kps_on_tape(
    tape: &mut Tape,
    logits: Var,
    labels: &[u32],
    mask: &KeyPointMask,
    margins: &MarginTable,
    scale: f64,
    valid: Option<&[bool]>,
) -> Result<Var> {
    check_kps(tape.value(logits), labels, mask, margins)?;
    check_valid(valid, labels.len())?;
    let (sc, sh) = kps_rows(mask, labels, margins, scale);
    let op = MarginCe {
        labels: labels.into(),
        scale: sc,
        shift: sh,
        valid: valid.map(Into::into),
    };
    Ok(tape.fused(Rc::new(op), &[logits]))
}

fn softmax(logits: &Mat) -> Mat {
    crate::autodiff::softmax_rows(logits)
}

struct SoftDiceOp {
    labels: Rc<[u32]>,
    valid: Option<Rc<[bool]>>,
}

impl FusedOp for SoftDiceOp {
    fn name(&self) -> &'static str {
        "soft_dice"
    }

    fn forward(&self, inputs: &[&Mat]) -> (Mat, Option<Cache>) {
        let p = softmax(inputs[0]);
        let v = dice_value(&dice_terms(&p, &self.labels, self.valid.as_deref()));
        (scalar(v), Some(Box::new(p)))
    }

    fn backward(&self, _: &[&Mat], _: &Mat, cache: Option<&Cache>, grad: &Mat) -> Vec<Option<Mat>> {
        let p = cache.unwrap().downcast_ref::<Mat>().unwrap();
        let valid = self.valid.as_deref();
        let t = dice_terms(p, &self.labels, valid);
        let (n, c) = p.dim();
        let mut dz = Mat::zeros((n, c));
        if t.present.is_empty() {
            return vec![Some(dz)];
        }
        let scale = -grad[[0, 0]] / t.present.len() as f64;
        // dD_k/dp_jk for present k
        let mut num = vec![0.0; c];
        let mut den = vec![0.0; c];
        let mut on = vec![false; c];
        for &k in &t.present {
            num[k] = 2.0 * t.inter[k] + DICE_EPS;
            den[k] = t.pred_sq[k] + t.truth[k] + DICE_EPS;
            on[k] = true;
        }
        let mut dp = vec![0.0; c];
        for j in 0..n {
            if !valid.is_none_or(|m| m[j]) {
                continue;
            }
            let y = self.labels[j] as usize;
            for k in 0..c {
                dp[k] = if on[k] {
                    let g = if k == y { 1.0 } else { 0.0 };
                    scale * (2.0 * g * den[k] - num[k] * 2.0 * p[[j, k]]) / (den[k] * den[k])
                } else {
                    0.0
                };
            }
            let dot: f64 = (0..c).map(|k| p[[j, k]] * dp[k]).sum();
            for k in 0..c {
                dz[[j, k]] = p[[j, k]] * (dp[k] - dot);
            }
        }
        vec![Some(dz)]
    }
}

/// SoftDice of `softmax(logits)`.
pub fn soft_dice_on_tape(tape: &mut Tape, logits: Var, labels: &[u32], valid: Option<&[bool]>) -> Result<Var> {
    check_labels(tape.value(logits), labels)?;
    check_valid(valid, labels.len())?;
    let op = SoftDiceOp {
        labels: labels.into(),
        valid: valid.map(Into::into),
    };
    Ok(tape.fused(Rc::new(op), &[logits]))
}

/// Convex blend node; `lambda` in `[0, 1]`.
pub fn rlt_on_tape(tape: &mut Tape, lambda: f64, kps: Var, sd: Var) -> Result<Var> {
    check_lambda(lambda)?;
    let a = tape.scale(kps, lambda);
    let b = tape.scale(sd, 1.0 - lambda);
    Ok(tape.add(a, b))
}

fn rows_as_points(m: &Mat) -> Vec<Point3> {
    m.rows().into_iter().map(|r| [r[0], r[1], r[2]]).collect()
}

struct ChamferOp;

struct ChamferCache {
    ab: Vec<(usize, f64)>,
    ba: Vec<(usize, f64)>,
}

impl FusedOp for ChamferOp {
    fn name(&self) -> &'static str {
        "chamfer"
    }

    fn forward(&self, inputs: &[&Mat]) -> (Mat, Option<Cache>) {
        let x = rows_as_points(inputs[0]);
        let y = rows_as_points(inputs[1]);
        let ab = nearest(&x, &SpatialIndex::from_points(&y));
        let ba = nearest(&y, &SpatialIndex::from_points(&x));
        let v = mean_sq(&ab) + mean_sq(&ba);
        (scalar(v), Some(Box::new(ChamferCache { ab, ba })))
    }

    fn backward(&self, inputs: &[&Mat], _: &Mat, cache: Option<&Cache>, grad: &Mat) -> Vec<Option<Mat>> {
        let cache = cache.unwrap().downcast_ref::<ChamferCache>().unwrap();
        let (x, y) = (inputs[0], inputs[1]);
        let mut dx = Mat::zeros(x.dim());
        let mut dy = Mat::zeros(y.dim());
        let g = grad[[0, 0]];
        let fx = 2.0 * g / x.nrows() as f64;
        for (i, &(n, _)) in cache.ab.iter().enumerate() {
            for a in 0..3 {
                let d = fx * (x[[i, a]] - y[[n, a]]);
                dx[[i, a]] += d;
                dy[[n, a]] -= d;
            }
        }
        let fy = 2.0 * g / y.nrows() as f64;
        for (j, &(n, _)) in cache.ba.iter().enumerate() {
            for a in 0..3 {
                let d = fy * (y[[j, a]] - x[[n, a]]);
                dy[[j, a]] += d;
                dx[[n, a]] -= d;
            }
        }
        vec![Some(dx), Some(dy)]
    }
}

/// Chamfer node over two `n x 3` and `m x 3` point matrices.
pub fn chamfer_on_tape(tape: &mut Tape, x: Var, y: Var) -> Result<Var> {
    for v in [x, y] {
        let m = tape.value(v);
        if m.nrows() == 0 || m.ncols() != 3 {
            return Err(Error::arg(format!("chamfer input has shape {:?}", m.dim())));
        }
    }
    Ok(tape.fused(Rc::new(ChamferOp), &[x, y]))
}

struct KlOp;

impl FusedOp for KlOp {
    fn name(&self) -> &'static str {
        "kl_diag_gaussian"
    }

    fn forward(&self, inputs: &[&Mat]) -> (Mat, Option<Cache>) {
        let (mq, sq, mp, sp) = (inputs[0], inputs[1], inputs[2], inputs[3]);
        let mut total = 0.0;
        for i in 0..mq.len() {
            let idx = (i / mq.ncols(), i % mq.ncols());
            total += kl_term(mq[idx], sq[idx], mp[idx], sp[idx]);
        }
        (scalar(total / mq.nrows() as f64), None)
    }

    fn backward(&self, inputs: &[&Mat], _: &Mat, _: Option<&Cache>, grad: &Mat) -> Vec<Option<Mat>> {
        let (mq, sq, mp, sp) = (inputs[0], inputs[1], inputs[2], inputs[3]);
        let g = grad[[0, 0]] / mq.nrows() as f64;
        let mut d = [
            Mat::zeros(mq.dim()),
            Mat::zeros(mq.dim()),
            Mat::zeros(mq.dim()),
            Mat::zeros(mq.dim()),
        ];
        for i in 0..mq.nrows() {
            for j in 0..mq.ncols() {
                let (a, s, b, t) = (mq[[i, j]], sq[[i, j]], mp[[i, j]], sp[[i, j]]);
                let t2 = t * t;
                d[0][[i, j]] = g * (a - b) / t2;
                d[1][[i, j]] = g * (-1.0 / s + s / t2);
                d[2][[i, j]] = -g * (a - b) / t2;
                d[3][[i, j]] = g * (1.0 / t - (s * s + (a - b) * (a - b)) / (t2 * t));
            }
        }
        d.into_iter().map(Some).collect()
    }
}

/// Mean over rows of the per-row KL divergence between diagonal Gaussians
/// `(mean_q, dev_q)` and `(mean_p, dev_p)`, all of equal shape.
pub fn kl_on_tape(tape: &mut Tape, mean_q: Var, dev_q: Var, mean_p: Var, dev_p: Var) -> Result<Var> {
    let shape = tape.value(mean_q).dim();
    for v in [dev_q, mean_p, dev_p] {
        if tape.value(v).dim() != shape {
            return Err(Error::arg("latent parameter shapes differ"));
        }
    }
    for v in [dev_q, dev_p] {
        if tape.value(v).iter().any(|&d| !(d > 0.0)) {
            return Err(Error::arg("deviations must be positive"));
        }
    }
    Ok(tape.fused(Rc::new(KlOp), &[mean_q, dev_q, mean_p, dev_p]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{gaussian_mat, softmax_rows};
    use crate::rng;
    use ndarray::array;
    use rand::Rng;

    fn numeric_grad(x: &Mat, f: impl Fn(&Mat) -> f64) -> Mat {
        let h = 1e-6;
        let mut g = Mat::zeros(x.dim());
        for idx in 0..x.len() {
            let ij = (idx / x.ncols(), idx % x.ncols());
            let mut p = x.clone();
            p[ij] += h;
            let mut m = x.clone();
            m[ij] -= h;
            g[ij] = (f(&p) - f(&m)) / (2.0 * h);
        }
        g
    }

    fn assert_close(a: &Mat, b: &Mat, tol: f64) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol * (1.0 + y.abs()), "{x} vs {y}");
        }
    }

    #[test]
    fn dice_examples() {
        let probs = array![[1.0, 0.0], [0.0, 1.0]];
        assert!(soft_dice(&probs, &[0, 1]).unwrap().abs() < 1e-7);
        // per-class ratio for class 0: 2*0.5 / (0.25 + 1)
        let v = soft_dice(&array![[0.5, 0.5]], &[0]).unwrap();
        assert!((v - 0.2).abs() < 1e-7, "{v}");
    }

    #[test]
    fn dice_matches_formula_oracle() {
        let mut r = rng::seeded(4);
        for _ in 0..20 {
            let n = r.random_range(1..30);
            let c = r.random_range(2..6);
            let probs = softmax_rows(&gaussian_mat(n, c, 2.0, &mut r));
            let labels: Vec<u32> = (0..n).map(|_| r.random_range(0..c as u32)).collect();
            let mut ratios = Vec::new();
            for k in 0..c {
                let members: Vec<usize> = (0..n).filter(|&j| labels[j] as usize == k).collect();
                if members.is_empty() {
                    continue;
                }
                let inter: f64 = members.iter().map(|&j| probs[[j, k]]).sum();
                let sq: f64 = (0..n).map(|j| probs[[j, k]].powi(2)).sum();
                ratios.push((2.0 * inter + 1e-7) / (sq + members.len() as f64 + 1e-7));
            }
            let want = 1.0 - ratios.iter().sum::<f64>() / ratios.len() as f64;
            assert!((soft_dice(&probs, &labels).unwrap() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn key_points_examples() {
        let imp = [0.1, 0.9, 0.5, 0.3, 0.8, 0.2, 0.7, 0.0, 0.6, 0.4];
        let m = key_point_mask(&imp, &[0; 10], 0.3).unwrap();
        let flagged: Vec<usize> = (0..10).filter(|&i| m.key[i]).collect();
        assert_eq!(flagged, [1, 4, 6]);
        assert_eq!(m.thresholds[0], Some(0.7));
        assert!(key_point_mask(&imp, &[0; 10], 1.0).unwrap().key.iter().all(|&k| k));
        let single = key_point_mask(&[0.0, 0.3], &[0, 1], 0.01).unwrap();
        assert_eq!(single.key, [true, true]);
        // ties to the lower ordinal
        let tie = key_point_mask(&[0.5; 4], &[2; 4], 0.5).unwrap();
        assert_eq!(tie.key, [true, true, false, false]);
        assert!(key_point_mask(&imp, &[0; 10], 0.0).is_err());
    }

    #[test]
    fn margin_examples() {
        let t = dynamic_margins(&ClassStats::from_counts(vec![1000, 10]), 0.25, 0.5).unwrap();
        assert_eq!(t.margins[1], 0.5);
        assert!((t.margins[0] - 0.5 * 100f64.powf(-0.25)).abs() < 1e-15);
        assert!((t.margins[0] - 0.1581).abs() < 1e-4);
        let eq = dynamic_margins(&ClassStats::from_counts(vec![7, 7, 0]), 0.25, 0.5).unwrap();
        assert_eq!(eq.margins, [0.5, 0.5, 0.5]);
        assert!(dynamic_margins(&ClassStats::from_counts(vec![0, 0]), 0.25, 0.5).is_err());
    }

    #[test]
    fn kps_examples() {
        let logits = array![[2.0, 0.0]];
        let mask = KeyPointMask {
            key: vec![true],
            thresholds: vec![],
            top_fraction: 1.0,
        };
        let margins = MarginTable {
            margins: vec![0.5, 0.5],
            exponent: 0.25,
            max_margin: 0.5,
        };
        let v = kps_loss(&logits, &[0], &mask, &margins, 1.0).unwrap();
        let want = -(1.5f64.exp() / (1.5f64.exp() + 1.0)).ln();
        assert!((v - want).abs() < 1e-15);
        assert!((v - 0.2014).abs() < 1e-4);
        let mut r = rng::seeded(3);
        let logits = gaussian_mat(20, 4, 1.5, &mut r);
        let labels: Vec<u32> = (0..20).map(|_| r.random_range(0..4)).collect();
        let all = KeyPointMask {
            key: vec![true; 20],
            thresholds: vec![],
            top_fraction: 1.0,
        };
        let ce = cross_entropy(&logits, &labels).unwrap();
        let zero = kps_loss(&logits, &labels, &all, &MarginTable::zeros(4), 1.0).unwrap();
        assert!((zero - ce).abs() < 1e-12);
        let empty = kps_loss(&logits, &labels, &KeyPointMask::empty(20), &margins_for(4), 10.0).unwrap();
        assert_eq!(empty, ce);
    }

    fn margins_for(c: usize) -> MarginTable {
        MarginTable {
            margins: (0..c).map(|k| 0.1 * k as f64).collect(),
            exponent: 0.25,
            max_margin: 0.5,
        }
    }

    #[test]
    fn rlt_examples() {
        assert_eq!(rlt_loss(0.0, 2.0, 0.4).unwrap(), 0.4);
        assert_eq!(rlt_loss(1.0, 2.0, 0.4).unwrap(), 2.0);
        assert!((rlt_loss(0.25, 2.0, 0.4).unwrap() - 0.8).abs() < 1e-15);
        assert!(rlt_loss(1.5, 2.0, 0.4).is_err());
        assert!(rlt_loss(-0.1, 2.0, 0.4).is_err());
    }

    #[test]
    fn chamfer_examples() {
        let x = [[0.0, 0.0, 0.0]];
        assert_eq!(chamfer(&x, &x).unwrap(), 0.0);
        assert_eq!(chamfer(&x, &[[1.0, 0.0, 0.0]]).unwrap(), 2.0);
        assert!(chamfer(&x, &[]).is_err());
    }

    #[test]
    fn kl_examples() {
        let n = |m: f64, s: f64| LatentGaussian::new(vec![m], vec![s]).unwrap();
        assert_eq!(kl_diag_gaussian(&n(1.0, 1.0), &n(1.0, 1.0)).unwrap(), 0.0);
        assert!((kl_diag_gaussian(&n(1.0, 1.0), &n(0.0, 1.0)).unwrap() - 0.5).abs() < 1e-15);
        assert!(LatentGaussian::new(vec![0.0], vec![0.0]).is_err());
        let bad = LatentGaussian {
            mean: vec![0.0],
            deviation: vec![-1.0],
        };
        assert!(kl_diag_gaussian(&bad, &n(0.0, 1.0)).is_err());
    }

    #[test]
    fn tape_ops_match_values_and_finite_differences() {
        let mut r = rng::seeded(8);
        let (n, c) = (12, 4);
        let logits = gaussian_mat(n, c, 1.0, &mut r);
        let labels: Vec<u32> = (0..n).map(|_| r.random_range(0..c as u32)).collect();
        let valid: Vec<bool> = (0..n).map(|j| j % 5 != 0).collect();
        let imp: Vec<f64> = (0..n).map(|_| r.random()).collect();
        let mask = key_point_mask(&imp, &labels, 0.5).unwrap();
        let margins = margins_for(c);

        type Build<'a> = Box<dyn Fn(&mut Tape, Var) -> Var + 'a>;
        type Plain<'a> = Box<dyn Fn(&Mat) -> f64 + 'a>;
        let cases: Vec<(Build, Plain)> = vec![
            (
                Box::new(|t, z| cross_entropy_on_tape(t, z, &labels, Some(&valid)).unwrap()),
                Box::new(|z| cross_entropy_masked(z, &labels, Some(&valid)).unwrap()),
            ),
            (
                Box::new(|t, z| kps_on_tape(t, z, &labels, &mask, &margins, 10.0, None).unwrap()),
                Box::new(|z| kps_loss(z, &labels, &mask, &margins, 10.0).unwrap()),
            ),
            (
                Box::new(|t, z| soft_dice_on_tape(t, z, &labels, Some(&valid)).unwrap()),
                Box::new(|z| soft_dice_masked(&softmax_rows(z), &labels, Some(&valid)).unwrap()),
            ),
        ];
        for (build, plain) in &cases {
            let mut t = Tape::new();
            let z = t.leaf(logits.clone(), true);
            let l = build(&mut t, z);
            assert_eq!(t.scalar(l), plain(&logits));
            let g = t.backward(l).unwrap();
            assert_close(g.get(z).unwrap(), &numeric_grad(&logits, plain), 1e-6);
        }
    }

    #[test]
    fn chamfer_and_kl_tape_gradients() {
        let mut r = rng::seeded(5);
        let x = gaussian_mat(7, 3, 1.0, &mut r);
        let y = gaussian_mat(5, 3, 1.0, &mut r);
        let mut t = Tape::new();
        let (vx, vy) = (t.leaf(x.clone(), true), t.leaf(y.clone(), true));
        let l = chamfer_on_tape(&mut t, vx, vy).unwrap();
        let f = |a: &Mat, b: &Mat| chamfer(&rows_as_points(a), &rows_as_points(b)).unwrap();
        assert_eq!(t.scalar(l), f(&x, &y));
        let g = t.backward(l).unwrap();
        assert_close(g.get(vx).unwrap(), &numeric_grad(&x, |a| f(a, &y)), 1e-5);
        assert_close(g.get(vy).unwrap(), &numeric_grad(&y, |b| f(&x, b)), 1e-5);

        let mq = gaussian_mat(3, 2, 1.0, &mut r);
        let sq = gaussian_mat(3, 2, 0.3, &mut r).mapv(|v| v.exp());
        let mp = gaussian_mat(3, 2, 1.0, &mut r);
        let sp = gaussian_mat(3, 2, 0.3, &mut r).mapv(|v| v.exp());
        let plain = |a: &Mat, b: &Mat, c: &Mat, d: &Mat| {
            (0..3)
                .map(|i| {
                    let q = LatentGaussian::new(a.row(i).to_vec(), b.row(i).to_vec()).unwrap();
                    let p = LatentGaussian::new(c.row(i).to_vec(), d.row(i).to_vec()).unwrap();
                    kl_diag_gaussian(&q, &p).unwrap()
                })
                .sum::<f64>()
                / 3.0
        };
        let mut t = Tape::new();
        let vs: Vec<Var> = [&mq, &sq, &mp, &sp].iter().map(|m| t.leaf((*m).clone(), true)).collect();
        let l = kl_on_tape(&mut t, vs[0], vs[1], vs[2], vs[3]).unwrap();
        assert!((t.scalar(l) - plain(&mq, &sq, &mp, &sp)).abs() < 1e-12);
        let g = t.backward(l).unwrap();
        assert_close(g.get(vs[0]).unwrap(), &numeric_grad(&mq, |a| plain(a, &sq, &mp, &sp)), 1e-6);
        assert_close(g.get(vs[1]).unwrap(), &numeric_grad(&sq, |b| plain(&mq, b, &mp, &sp)), 1e-6);
        assert_close(g.get(vs[2]).unwrap(), &numeric_grad(&mp, |c| plain(&mq, &sq, c, &sp)), 1e-6);
        assert_close(g.get(vs[3]).unwrap(), &numeric_grad(&sp, |d| plain(&mq, &sq, &mp, d)), 1e-6);
    }

    #[test]
    fn rlt_on_tape_endpoints() {
        let mut t = Tape::new();
        let k = t.scalar_constant(1.7);
        let s = t.scalar_constant(0.3);
        let a = rlt_on_tape(&mut t, 0.0, k, s).unwrap();
        let b = rlt_on_tape(&mut t, 1.0, k, s).unwrap();
        assert_eq!((t.scalar(a), t.scalar(b)), (0.3, 1.7));
    }
}
