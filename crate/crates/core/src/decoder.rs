//! Probabilistic restoration network for perturbed point clouds.
//!
//! Restoration runs in three stages:
//!
//! 1. reconstruction: a max-pooled point encoder yields a global feature and
//!    a diagonal-Gaussian latent; an MLP decodes `M` coarse points;
//! 2. completion: coarse points supported by the input are merged with the
//!    input and farthest-point sampling keeps `M` of them;
//! 3. enhancement: every kept point emits [`UPSAMPLE`] children, each moved
//!    toward an attention-weighted mean of its input neighbors by a bounded
//!    offset.
//!
//! All stages work in a canonical frame (centroid at the origin, principal
//! horizontal axis along `+x`), which makes restoration equivariant under
//! rotation about the vertical axis.

use std::f64::consts::PI;
use std::path::Path;
use std::rc::Rc;

use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::autodiff::{
    adam_step, AdamHyper, AdamState, Cache, Checkpoint, CheckpointKind, Dense, FusedOp, Mat, ParamTensor,
    Parameterized, Tape, Var,
};
use crate::cloud::{distance_sq, LabeledCloud, Point3, SpatialIndex};
use crate::error::{Error, Result};
use crate::losses::{chamfer_on_tape, kl_on_tape};
pub use crate::losses::LatentGaussian;
use crate::rng;

/// Children emitted per kept point.
pub const UPSAMPLE: usize = 4;
const DEVIATION_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecoderConfig {
    pub latent_dim: usize,
    /// `M`; restoration emits `UPSAMPLE * M` points.
    pub coarse_points: usize,
    pub encoder_hidden: usize,
    pub global_dim: usize,
    pub decoder_hidden: usize,
    /// Input neighbors attended to by each kept point.
    pub knn: usize,
    /// Per-axis bound (m) of enhancement offsets.
    pub offset_bound: f64,
    /// Coarse points farther than this from every input point are dropped
    /// during completion.
    pub support_radius: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            latent_dim: 32,
            coarse_points: 256,
            encoder_hidden: 64,
            global_dim: 128,
            decoder_hidden: 256,
            knn: 16,
            offset_bound: 0.5,
            support_radius: 0.15,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentPath {
    /// Fed the perturbed cloud.
    Prior,
    /// Fed the clean cloud; used only in training.
    Posterior,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderModel {
    pub config: DecoderConfig,
    pub enc1: Dense,
    pub enc2: Dense,
    pub prior_head: Dense,
    pub posterior_head: Dense,
    pub dec1: Dense,
    pub dec2: Dense,
    /// Attention direction of each child (`UPSAMPLE x 3`); its norm acts as a temperature.
    pub attn_dirs: ParamTensor,
    /// Offset gain of each child (`1 x UPSAMPLE`).
    pub gates: ParamTensor,
    /// Mean RMS radius of the training shapes; scene patches are scaled to it.
    pub reference_radius: f64,
    pub trained: bool,
}

impl Parameterized for DecoderModel {
    fn params(&self) -> Vec<&ParamTensor> {
        let mut v: Vec<&ParamTensor> = [
            &self.enc1,
            &self.enc2,
            &self.prior_head,
            &self.posterior_head,
            &self.dec1,
            &self.dec2,
        ]
        .into_iter()
        .flat_map(|d| [&d.weight, &d.bias])
        .collect();
        v.extend([&self.attn_dirs, &self.gates]);
        v
    }

    fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut v: Vec<&mut ParamTensor> = [
            &mut self.enc1,
            &mut self.enc2,
            &mut self.prior_head,
            &mut self.posterior_head,
            &mut self.dec1,
            &mut self.dec2,
        ]
        .into_iter()
        .flat_map(|d| [&mut d.weight, &mut d.bias])
        .collect();
        v.extend([&mut self.attn_dirs, &mut self.gates]);
        v
    }
}

fn tetrahedral_dirs(temperature: f64) -> Mat {
    let s = temperature / 3f64.sqrt();
    Mat::from_shape_vec(
        (UPSAMPLE, 3),
        vec![1.0, 1.0, 1.0, 1.0, -1.0, -1.0, -1.0, 1.0, -1.0, -1.0, -1.0, 1.0]
            .into_iter()
            .map(|v| v * s)
            .collect(),
    )
    .unwrap()
}

/// Recorded parameter leaves of one forward pass.
struct Leaves {
    dense: Vec<(Var, Var)>,
    dirs: Var,
    gates: Var,
}

impl DecoderModel {
    pub fn new(config: DecoderConfig, seed: u64) -> Self {
        let mut r = rng::substream(seed, "decoder-init");
        let c = config;
        let head = |r: &mut rng::Rng| {
            let mut d = Dense::init(c.global_dim, 2 * c.latent_dim, r);
            // small heads start near a standard-ish latent
            d.weight.data.iter_mut().for_each(|w| *w *= 0.1);
            d
        };
        let prior_head = head(&mut r);
        let posterior_head = head(&mut r);
        let mut dec2 = Dense::init(c.decoder_hidden, 3 * c.coarse_points, &mut r);
        dec2.weight.data.iter_mut().for_each(|w| *w *= 0.5);
        Self {
            enc1: Dense::init(3, c.encoder_hidden, &mut r),
            enc2: Dense::init(c.encoder_hidden, c.global_dim, &mut r),
            prior_head,
            posterior_head,
            dec1: Dense::init(c.latent_dim + c.global_dim, c.decoder_hidden, &mut r),
            dec2,
            attn_dirs: ParamTensor::from_mat(&tetrahedral_dirs(10.0)),
            gates: ParamTensor::from_mat(&Mat::ones((1, UPSAMPLE))),
            reference_radius: 0.6,
            trained: false,
            config,
        }
    }

    /// Same shapes with every parameter zero.
    pub fn zeroed(&self) -> Self {
        let mut m = self.clone();
        for p in m.params_mut() {
            p.data.iter_mut().for_each(|v| *v = 0.0);
        }
        m
    }

    pub fn restored_len(&self) -> usize {
        UPSAMPLE * self.config.coarse_points
    }

    fn record_params(&self, tape: &mut Tape, trainable: bool) -> Leaves {
        let dense = [
            &self.enc1,
            &self.enc2,
            &self.prior_head,
            &self.posterior_head,
            &self.dec1,
            &self.dec2,
        ]
        .iter()
        .map(|d| d.record(tape, trainable))
        .collect();
        Leaves {
            dense,
            dirs: self.attn_dirs.record(tape, trainable),
            gates: self.gates.record(tape, trainable),
        }
    }

    fn record_encoder(&self, tape: &mut Tape, leaves: &Leaves, x: Var) -> Var {
        let (w1, b1) = leaves.dense[0];
        let (w2, b2) = leaves.dense[1];
        let h = tape.affine(x, w1, b1);
        let h = tape.relu(h);
        let h = tape.affine(h, w2, b2);
        let h = tape.relu(h);
        tape.max_rows(h)
    }

    fn record_head(&self, tape: &mut Tape, leaves: &Leaves, global: Var, path: LatentPath) -> (Var, Var) {
        let (w, b) = leaves.dense[if path == LatentPath::Prior { 2 } else { 3 }];
        let d = self.config.latent_dim;
        let out = tape.affine(global, w, b);
        let mean = tape.slice_cols(out, 0, d);
        let raw = tape.slice_cols(out, d, 2 * d);
        let sp = tape.softplus(raw);
        let floor = tape.constant(Mat::from_elem((1, d), DEVIATION_FLOOR));
        let dev = tape.add(sp, floor);
        (mean, dev)
    }

    fn record_coarse(&self, tape: &mut Tape, leaves: &Leaves, z: Var, global: Var) -> Var {
        let (w1, b1) = leaves.dense[4];
        let (w2, b2) = leaves.dense[5];
        let input = tape.concat_cols(&[z, global]);
        let h = tape.affine(input, w1, b1);
        let h = tape.relu(h);
        let out = tape.affine(h, w2, b2);
        tape.reshape(out, self.config.coarse_points, 3)
    }

    /// Global feature and latent Gaussian of `points`, taken as given (no
    /// canonicalization).
    pub fn encode(&self, points: &[Point3], path: LatentPath) -> Result<(Vec<f64>, LatentGaussian)> {
        if points.is_empty() {
            return Err(Error::arg("cannot encode an empty cloud"));
        }
        let mut tape = Tape::new();
        let leaves = self.record_params(&mut tape, false);
        let x = tape.constant(points_to_mat(points));
        let g = self.record_encoder(&mut tape, &leaves, x);
        let (mean, dev) = self.record_head(&mut tape, &leaves, g, path);
        let latent = LatentGaussian {
            mean: tape.value(mean).iter().copied().collect(),
            deviation: tape.value(dev).iter().copied().collect(),
        };
        Ok((tape.value(g).iter().copied().collect(), latent))
    }

    /// `M` coarse points from a latent sample and a global feature.
    pub fn decode_coarse(&self, z: &[f64], global: &[f64]) -> Result<Vec<Point3>> {
        let c = &self.config;
        if z.len() != c.latent_dim || global.len() != c.global_dim {
            return Err(Error::arg("latent or global feature has the wrong length"));
        }
        let mut tape = Tape::new();
        let leaves = self.record_params(&mut tape, false);
        let zv = tape.constant(Mat::from_shape_vec((1, z.len()), z.to_vec()).unwrap());
        let gv = tape.constant(Mat::from_shape_vec((1, global.len()), global.to_vec()).unwrap());
        let out = self.record_coarse(&mut tape, &leaves, zv, gv);
        Ok(mat_to_points(tape.value(out)))
    }

    /// Children of `kept` (`UPSAMPLE` per point, in order) from attention over
    /// their `knn` nearest `input` points.
    pub fn enhance(&self, kept: &[Point3], input: &[Point3]) -> Result<Vec<Point3>> {
        if kept.is_empty() || input.is_empty() {
            return Err(Error::arg("enhancement needs kept and input points"));
        }
        let sel: Vec<Selected> = (0..kept.len()).map(Selected::Coarse).collect();
        let op = EnhanceOp::new(input, sel, self.config.knn, self.config.offset_bound);
        let (out, _) = op.forward(&[&points_to_mat(kept), &self.attn_dirs.to_mat(), &self.gates.to_mat()]);
        Ok(mat_to_points(&out))
    }

    /// Full pipeline on a cloud at training scale, using the prior mean.
    pub fn restore(&self, points: &[Point3]) -> Result<Vec<Point3>> {
        if !self.trained {
            return Err(Error::State("decoder has not been trained".into()));
        }
        self.restore_untrained(points)
    }

    fn restore_untrained(&self, points: &[Point3]) -> Result<Vec<Point3>> {
        if points.is_empty() {
            return Err(Error::arg("cannot restore an empty cloud"));
        }
        let frame = Frame::of(points);
        let local: Vec<Point3> = points.iter().map(|p| frame.to_local(p)).collect();
        let (global, prior) = self.encode(&local, LatentPath::Prior)?;
        let coarse = self.decode_coarse(&prior.mean, &global)?;
        let sel = complete(&coarse, &local, self.config.coarse_points, self.config.support_radius);
        let op = EnhanceOp::new(&local, sel, self.config.knn, self.config.offset_bound);
        let (out, _) = op.forward(&[&points_to_mat(&coarse), &self.attn_dirs.to_mat(), &self.gates.to_mat()]);
        Ok(mat_to_points(&out).iter().map(|p| frame.to_world(p)).collect())
    }

    /// Restores a scene patch by patch. Patches of at most `patch_points`
    /// are scaled to the training radius before restoration.
    pub fn restore_scene(&self, cloud: &LabeledCloud, patch_points: usize) -> Result<Vec<Point3>> {
        if !self.trained {
            return Err(Error::State("decoder has not been trained".into()));
        }
        if patch_points == 0 {
            return Err(Error::arg("patch size must be positive"));
        }
        let mut out = Vec::new();
        for patch in split_patches(&cloud.points, patch_points) {
            let pts: Vec<Point3> = patch.iter().map(|&j| cloud.points[j]).collect();
            let c = centroid(&pts);
            let rms = (pts.iter().map(|p| distance_sq(p, &c)).sum::<f64>() / pts.len() as f64).sqrt();
            let k = if rms > 1e-9 { self.reference_radius / rms } else { 1.0 };
            let scaled: Vec<Point3> = pts.iter().map(|p| std::array::from_fn(|a| (p[a] - c[a]) * k)).collect();
            for q in self.restore(&scaled)? {
                out.push(std::array::from_fn(|a| q[a] / k + c[a]));
            }
        }
        Ok(out)
    }

    pub fn all_finite(&self) -> bool {
        self.params().iter().all(|p| p.data.iter().all(|v| v.is_finite()))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let c = &self.config;
        Checkpoint {
            kind: CheckpointKind::Decoder,
            ints: [
                c.latent_dim,
                c.coarse_points,
                c.encoder_hidden,
                c.global_dim,
                c.decoder_hidden,
                c.knn,
                self.trained as usize,
            ]
            .map(|v| v as u32)
            .into_iter()
            .chain([c.offset_bound, c.support_radius, self.reference_radius].into_iter().flat_map(split_f64))
            .collect(),
            floats: Vec::new(),
            tensors: self.params().into_iter().cloned().collect(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint, path: &Path) -> Result<Self> {
        ck.expect_kind(CheckpointKind::Decoder, path)?;
        let bad = |m: &str| Error::Format {
            path: path.to_path_buf(),
            message: m.to_string(),
        };
        if ck.ints.len() != 13 || !ck.floats.is_empty() || ck.tensors.len() != 14 {
            return Err(bad("decoder checkpoint has the wrong layout"));
        }
        let i = |k: usize| ck.ints[k] as usize;
        let f = |k: usize| join_f64(ck.ints[7 + 2 * k], ck.ints[8 + 2 * k]);
        let config = DecoderConfig {
            latent_dim: i(0),
            coarse_points: i(1),
            encoder_hidden: i(2),
            global_dim: i(3),
            decoder_hidden: i(4),
            knn: i(5),
            offset_bound: f(0),
            support_radius: f(1),
        };
        let mut m = Self::new(config, 0);
        for (dst, src) in m.params_mut().into_iter().zip(&ck.tensors) {
            if dst.shape() != src.shape() {
                return Err(bad("decoder tensor shape disagrees with its configuration"));
            }
            *dst = src.clone();
        }
        m.trained = ck.ints[6] == 1;
        m.reference_radius = f(2);
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, path)
    }
}

fn split_f64(v: f64) -> [u32; 2] {
    let b = v.to_bits();
    [(b >> 32) as u32, b as u32]
}

fn join_f64(hi: u32, lo: u32) -> f64 {
    f64::from_bits(((hi as u64) << 32) | lo as u64)
}

pub fn points_to_mat(points: &[Point3]) -> Mat {
    Mat::from_shape_fn((points.len(), 3), |(i, a)| points[i][a])
}

pub fn mat_to_points(m: &Mat) -> Vec<Point3> {
    m.rows().into_iter().map(|r| [r[0], r[1], r[2]]).collect()
}

fn centroid(points: &[Point3]) -> Point3 {
    let mut c = [0.0; 3];
    for p in points {
        for a in 0..3 {
            c[a] += p[a];
        }
    }
    c.map(|v| v / points.len() as f64)
}

/// Canonical frame: centroid at the origin, principal horizontal axis on `+x`
/// (oriented by the sign of the third moment along it).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame {
    pub center: Point3,
    pub cos: f64,
    pub sin: f64,
}

impl Frame {
    pub fn of(points: &[Point3]) -> Self {
        let center = centroid(points);
        let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
        for p in points {
            let (x, y) = (p[0] - center[0], p[1] - center[1]);
            sxx += x * x;
            syy += y * y;
            sxy += x * y;
        }
        let phi = 0.5 * (2.0 * sxy).atan2(sxx - syy);
        let (mut cos, mut sin) = (phi.cos(), phi.sin());
        let skew: f64 = points
            .iter()
            .map(|p| ((p[0] - center[0]) * cos + (p[1] - center[1]) * sin).powi(3))
            .sum();
        if skew < 0.0 {
            cos = -cos;
            sin = -sin;
        }
        Self { center, cos, sin }
    }

    pub fn to_local(&self, p: &Point3) -> Point3 {
        let (x, y) = (p[0] - self.center[0], p[1] - self.center[1]);
        [self.cos * x + self.sin * y, -self.sin * x + self.cos * y, p[2] - self.center[2]]
    }

    pub fn to_world(&self, p: &Point3) -> Point3 {
        [
            self.cos * p[0] - self.sin * p[1] + self.center[0],
            self.sin * p[0] + self.cos * p[1] + self.center[1],
            p[2] + self.center[2],
        ]
    }
}

/// Farthest-point sampling of `m` indices starting from index 0; ties go to
/// the lower index. Fewer than `m` points are cycled.
pub fn farthest_point_sample(points: &[Point3], m: usize) -> Vec<usize> {
    if points.is_empty() || m == 0 {
        return Vec::new();
    }
    let n = points.len();
    let mut out = Vec::with_capacity(m);
    let mut dist = vec![f64::INFINITY; n];
    let mut cur = 0;
    for _ in 0..m.min(n) {
        out.push(cur);
        let mut best = 0;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..n {
            let d = distance_sq(&points[i], &points[cur]);
            if d < dist[i] {
                dist[i] = d;
            }
            if dist[i] > best_d {
                best_d = dist[i];
                best = i;
            }
        }
        cur = best;
    }
    let picked = out.len();
    for i in picked..m {
        out.push(out[i % picked]);
    }
    out
}

/// Origin of a kept point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selected {
    Coarse(usize),
    Input(usize),
}

/// Completion stage: input points and supported coarse points, thinned to
/// `m` by farthest-point sampling.
pub fn complete(coarse: &[Point3], input: &[Point3], m: usize, support_radius: f64) -> Vec<Selected> {
    let index = SpatialIndex::from_points(input);
    let r2 = support_radius * support_radius;
    let mut merged: Vec<Point3> = input.to_vec();
    let mut origin: Vec<Selected> = (0..input.len()).map(Selected::Input).collect();
    for (i, c) in coarse.iter().enumerate() {
        let supported = index
            .knn(c, 1)
            .ok()
            .and_then(|n| n.first().map(|n| n.distance * n.distance <= r2))
            .unwrap_or(false);
        if supported {
            merged.push(*c);
            origin.push(Selected::Coarse(i));
        }
    }
    farthest_point_sample(&merged, m).into_iter().map(|i| origin[i]).collect()
}

/// Enhancement node. Inputs: coarse points (`M x 3`), attention directions,
/// gates. Kept input points are constants.
struct EnhanceOp {
    input: Vec<Point3>,
    index: SpatialIndex,
    selection: Vec<Selected>,
    knn: usize,
    bound: f64,
}

impl EnhanceOp {
    fn new(input: &[Point3], selection: Vec<Selected>, knn: usize, bound: f64) -> Self {
        Self {
            input: input.to_vec(),
            index: SpatialIndex::from_points(input),
            selection,
            knn,
            bound,
        }
    }

    fn anchor(&self, s: Selected, coarse: &Mat) -> Point3 {
        match s {
            Selected::Coarse(i) => [coarse[[i, 0]], coarse[[i, 1]], coarse[[i, 2]]],
            Selected::Input(j) => self.input[j],
        }
    }

    /// Neighbor offsets `p_k - q` and per-head attention weights.
    fn attend(&self, q: &Point3, nn: &[usize], dirs: &Mat) -> (Vec<Point3>, Vec<Vec<f64>>) {
        let rel: Vec<Point3> = nn
            .iter()
            .map(|&k| std::array::from_fn(|a| self.input[k][a] - q[a]))
            .collect();
        let weights = (0..UPSAMPLE)
            .map(|h| {
                let s: Vec<f64> = rel
                    .iter()
                    .map(|r| (0..3).map(|a| r[a] * dirs[[h, a]]).sum())
                    .collect();
                let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = s.iter().map(|v| (v - max).exp()).collect();
                let z: f64 = e.iter().sum();
                e.into_iter().map(|v| v / z).collect()
            })
            .collect();
        (rel, weights)
    }
}

impl FusedOp for EnhanceOp {
    fn name(&self) -> &'static str {
        "enhance"
    }

    fn forward(&self, inputs: &[&Mat]) -> (Mat, Option<Cache>) {
        let (coarse, dirs, gates) = (inputs[0], inputs[1], inputs[2]);
        let mut out = Mat::zeros((self.selection.len() * UPSAMPLE, 3));
        let mut neighbors = Vec::with_capacity(self.selection.len());
        for (s, &sel) in self.selection.iter().enumerate() {
            let q = self.anchor(sel, coarse);
            let nn: Vec<usize> = self.index.knn_unchecked(&q, self.knn).iter().map(|n| n.ordinal).collect();
            let (rel, w) = self.attend(&q, &nn, dirs);
            for h in 0..UPSAMPLE {
                for a in 0..3 {
                    let m: f64 = rel.iter().zip(&w[h]).map(|(r, wk)| wk * r[a]).sum();
                    let u = 2.0 * gates[[0, h]] * m / (2.0 * self.bound);
                    out[[s * UPSAMPLE + h, a]] = q[a] + self.bound * u.tanh();
                }
            }
            neighbors.push(nn);
        }
        (out, Some(Box::new(neighbors)))
    }

    fn backward(&self, inputs: &[&Mat], _: &Mat, cache: Option<&Cache>, grad: &Mat) -> Vec<Option<Mat>> {
        let (coarse, dirs, gates) = (inputs[0], inputs[1], inputs[2]);
        let neighbors = cache.unwrap().downcast_ref::<Vec<Vec<usize>>>().unwrap();
        let mut d_coarse = Mat::zeros(coarse.dim());
        let mut d_dirs = Mat::zeros(dirs.dim());
        let mut d_gates = Mat::zeros(gates.dim());
        for (s, &sel) in self.selection.iter().enumerate() {
            let q = self.anchor(sel, coarse);
            let (rel, w) = self.attend(&q, &neighbors[s], dirs);
            let mut dq = [0.0; 3];
            let mut d_rel = vec![[0.0; 3]; rel.len()];
            for h in 0..UPSAMPLE {
                let row = s * UPSAMPLE + h;
                let g = gates[[0, h]];
                let m: Point3 = std::array::from_fn(|a| rel.iter().zip(&w[h]).map(|(r, wk)| wk * r[a]).sum());
                // out = q + b tanh(g m / b)
                let mut dm = [0.0; 3];
                for a in 0..3 {
                    let t = (g * m[a] / self.bound).tanh();
                    let du = grad[[row, a]] * (1.0 - t * t);
                    dq[a] += grad[[row, a]];
                    dm[a] = du * g;
                    d_gates[[0, h]] += du * m[a];
                }
                // m = sum_k w_k rel_k, w = softmax(rel_k . dir_h)
                let dw: Vec<f64> = rel.iter().map(|r| (0..3).map(|a| dm[a] * r[a]).sum()).collect();
                let avg: f64 = w[h].iter().zip(&dw).map(|(wk, d)| wk * d).sum();
                for (k, r) in rel.iter().enumerate() {
                    let ds = w[h][k] * (dw[k] - avg);
                    for a in 0..3 {
                        d_rel[k][a] += w[h][k] * dm[a] + ds * dirs[[h, a]];
                        d_dirs[[h, a]] += ds * r[a];
                    }
                }
            }
            if let Selected::Coarse(i) = sel {
                for a in 0..3 {
                    let back: f64 = d_rel.iter().map(|d| d[a]).sum();
                    d_coarse[[i, a]] += dq[a] - back;
                }
            }
        }
        vec![Some(d_coarse), Some(d_dirs), Some(d_gates)]
    }
}

/// Rotation about the vertical axis followed by uniform scaling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Augmentation {
    pub angle: f64,
    pub scale: f64,
}

impl Augmentation {
    pub fn apply(&self, p: &Point3) -> Point3 {
        let (c, s) = (self.angle.cos(), self.angle.sin());
        [
            self.scale * (c * p[0] - s * p[1]),
            self.scale * (s * p[0] + c * p[1]),
            self.scale * p[2],
        ]
    }

    pub fn invert(&self, p: &Point3) -> Point3 {
        let (c, s) = (self.angle.cos(), self.angle.sin());
        let q = p.map(|v| v / self.scale);
        [c * q[0] + s * q[1], -s * q[0] + c * q[1], q[2]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentBounds {
    /// Rotation angle drawn from `[-max_angle, max_angle]`.
    pub max_angle: f64,
    pub scale_min: f64,
    pub scale_max: f64,
}

impl Default for AugmentBounds {
    fn default() -> Self {
        Self {
            max_angle: PI,
            scale_min: 0.95,
            scale_max: 1.05,
        }
    }
}

impl AugmentBounds {
    pub fn identity() -> Self {
        Self {
            max_angle: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
        }
    }
}

/// Adds `N(0, noise_sigma^2)` offsets, then applies a random augmentation.
pub fn perturb_points(
    points: &[Point3],
    noise_sigma: f64,
    bounds: &AugmentBounds,
    seed: u64,
) -> Result<(Vec<Point3>, Augmentation)> {
    if !(noise_sigma >= 0.0) {
        return Err(Error::arg("noise_sigma must be non-negative"));
    }
    let mut r = rng::substream(seed, "perturb-augment");
    let noise = Normal::new(0.0, noise_sigma).map_err(|e| Error::arg(e.to_string()))?;
    let aug = Augmentation {
        angle: if bounds.max_angle > 0.0 {
            r.random_range(-bounds.max_angle..=bounds.max_angle)
        } else {
            0.0
        },
        scale: if bounds.scale_max > bounds.scale_min {
            r.random_range(bounds.scale_min..=bounds.scale_max)
        } else {
            bounds.scale_min
        },
    };
    let out = points
        .iter()
        .map(|p| {
            let noisy: Point3 = std::array::from_fn(|a| p[a] + noise.sample(&mut r));
            aug.apply(&noisy)
        })
        .collect();
    Ok((out, aug))
}

/// [`perturb_points`] on a labeled cloud with default augmentation bounds.
pub fn perturb_and_augment(cloud: &LabeledCloud, noise_sigma: f64, seed: u64) -> Result<LabeledCloud> {
    perturb_and_augment_with(cloud, noise_sigma, &AugmentBounds::default(), seed)
}

pub fn perturb_and_augment_with(
    cloud: &LabeledCloud,
    noise_sigma: f64,
    bounds: &AugmentBounds,
    seed: u64,
) -> Result<LabeledCloud> {
    let (points, _) = perturb_points(&cloud.points, noise_sigma, bounds, seed)?;
    let mut out = cloud.clone();
    out.points = points;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecoderTrainConfig {
    pub epochs: usize,
    pub lambda_kl: f64,
    pub noise_sigma: f64,
    pub augment: AugmentBounds,
    pub adam: AdamHyper,
    pub seed: u64,
}

impl Default for DecoderTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lambda_kl: 0.01,
            noise_sigma: 0.05,
            augment: AugmentBounds::default(),
            adam: AdamHyper {
                lr: 1e-3,
                ..Default::default()
            },
            seed: 0,
        }
    }
}

/// Per-epoch means of the loss and its parts.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DecoderTrace {
    pub total: Vec<f64>,
    pub coarse_cd: Vec<f64>,
    pub fine_cd: Vec<f64>,
    pub kl: Vec<f64>,
}

impl DecoderTrace {
    pub fn len(&self) -> usize {
        self.total.len()
    }

    pub fn is_empty(&self) -> bool {
        self.total.is_empty()
    }
}

/// Loss parts and parameter gradients of one training example.
pub struct DecoderStep {
    pub total: f64,
    pub coarse_cd: f64,
    pub fine_cd: f64,
    pub kl: f64,
    pub grads: Vec<Mat>,
}

/// Loss `cd(coarse) + cd(fine) + lambda_kl * KL(posterior || prior)` and its
/// gradients for one clean shape.
pub fn decoder_step(
    model: &DecoderModel,
    clean: &[Point3],
    cfg: &DecoderTrainConfig,
    seed: u64,
) -> Result<DecoderStep> {
    let (noisy, aug) = perturb_points(clean, cfg.noise_sigma, &cfg.augment, seed)?;
    let target: Vec<Point3> = clean.iter().map(|p| aug.apply(p)).collect();
    let frame = Frame::of(&noisy);
    let local_in: Vec<Point3> = noisy.iter().map(|p| frame.to_local(p)).collect();
    let local_t: Vec<Point3> = target.iter().map(|p| frame.to_local(p)).collect();

    let mut tape = Tape::new();
    let leaves = model.record_params(&mut tape, true);
    let xg = tape.constant(points_to_mat(&local_in));
    let xt = tape.constant(points_to_mat(&local_t));
    let g_in = model.record_encoder(&mut tape, &leaves, xg);
    let g_t = model.record_encoder(&mut tape, &leaves, xt);
    let (mp, dp) = model.record_head(&mut tape, &leaves, g_in, LatentPath::Prior);
    let (mq, dq) = model.record_head(&mut tape, &leaves, g_t, LatentPath::Posterior);
    let mut r = rng::substream(seed, "reparameterize");
    let eps = Mat::from_shape_fn((1, model.config.latent_dim), |_| StandardNormal.sample(&mut r));
    let eps = tape.constant(eps);
    let noise = tape.mul(dq, eps);
    let z = tape.add(mq, noise);
    let coarse = model.record_coarse(&mut tape, &leaves, z, g_in);
    let coarse_pts = mat_to_points(tape.value(coarse));
    let sel = complete(&coarse_pts, &local_in, model.config.coarse_points, model.config.support_radius);
    let op = EnhanceOp::new(&local_in, sel, model.config.knn, model.config.offset_bound);
    let fine = tape.fused(Rc::new(op), &[coarse, leaves.dirs, leaves.gates]);
    let cd_coarse = chamfer_on_tape(&mut tape, coarse, xt)?;
    let cd_fine = chamfer_on_tape(&mut tape, fine, xt)?;
    let kl = kl_on_tape(&mut tape, mq, dq, mp, dp)?;
    let weighted = tape.scale(kl, cfg.lambda_kl);
    let recon = tape.add(cd_coarse, cd_fine);
    let total = tape.add(recon, weighted);
    let grads = tape.backward(total)?;
    let mut flat: Vec<Mat> = Vec::with_capacity(14);
    for (p, (w, b)) in model.params().chunks(2).zip(&leaves.dense) {
        flat.push(grads.get_or_zeros(*w, p[0].shape()));
        flat.push(grads.get_or_zeros(*b, p[1].shape()));
    }
    flat.push(grads.get_or_zeros(leaves.dirs, model.attn_dirs.shape()));
    flat.push(grads.get_or_zeros(leaves.gates, model.gates.shape()));
    Ok(DecoderStep {
        total: tape.scalar(total),
        coarse_cd: tape.scalar(cd_coarse),
        fine_cd: tape.scalar(cd_fine),
        kl: tape.scalar(kl),
        grads: flat,
    })
}

/// Trains on clean shapes, one Adam step per shape per epoch.
pub fn train_decoder(model: &mut DecoderModel, clean: &[Vec<Point3>], cfg: &DecoderTrainConfig) -> Result<DecoderTrace> {
    if clean.is_empty() || clean.iter().any(|c| c.is_empty()) {
        return Err(Error::arg("decoder training needs at least one non-empty cloud"));
    }
    let radii: f64 = clean
        .iter()
        .map(|c| {
            let m = centroid(c);
            (c.iter().map(|p| distance_sq(p, &m)).sum::<f64>() / c.len() as f64).sqrt()
        })
        .sum();
    model.reference_radius = radii / clean.len() as f64;
    let mut adam = AdamState::default();
    let mut trace = DecoderTrace::default();
    let mut order: Vec<usize> = (0..clean.len()).collect();
    let mut r = rng::substream(cfg.seed, "decoder-order");
    for epoch in 0..cfg.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut r);
        let mut sums = [0.0; 4];
        for (i, &s) in order.iter().enumerate() {
            let seed = rng::substream_seed(cfg.seed, &format!("decoder-step/{epoch}/{i}"));
            let step = decoder_step(model, &clean[s], cfg, seed).map_err(|e| Error::Training {
                epoch,
                message: e.to_string(),
            })?;
            if !step.total.is_finite() {
                return Err(Error::Training {
                    epoch,
                    message: "non-finite decoder loss".into(),
                });
            }
            adam_step(model, &step.grads, &mut adam, &cfg.adam)?;
            for (acc, v) in sums.iter_mut().zip([step.total, step.coarse_cd, step.fine_cd, step.kl]) {
                *acc += v;
            }
        }
        let n = clean.len() as f64;
        trace.total.push(sums[0] / n);
        trace.coarse_cd.push(sums[1] / n);
        trace.fine_cd.push(sums[2] / n);
        trace.kl.push(sums[3] / n);
        if !model.all_finite() {
            return Err(Error::Training {
                epoch,
                message: "non-finite decoder parameters".into(),
            });
        }
    }
    model.trained = true;
    Ok(trace)
}

/// Labels restored points from the nearest valid source point within
/// `radius`; the rest are marked invalid (label 0).
pub fn fuse_labels(
    restored: &[Point3],
    source: &[Point3],
    labels: &[u32],
    valid: &[bool],
    radius: f64,
) -> Result<(Vec<u32>, Vec<bool>)> {
    if source.len() != labels.len() || source.len() != valid.len() {
        return Err(Error::arg("source points, labels and mask differ in length"));
    }
    let keep: Vec<usize> = (0..source.len()).filter(|&j| valid[j]).collect();
    let pts: Vec<Point3> = keep.iter().map(|&j| source[j]).collect();
    let index = SpatialIndex::from_points(&pts);
    let mut out_labels = Vec::with_capacity(restored.len());
    let mut out_valid = Vec::with_capacity(restored.len());
    for p in restored {
        match index.knn_unchecked(p, 1).first() {
            Some(n) if n.distance <= radius => {
                out_labels.push(labels[keep[n.ordinal]]);
                out_valid.push(true);
            }
            _ => {
                out_labels.push(0);
                out_valid.push(false);
            }
        }
    }
    Ok((out_labels, out_valid))
}

/// Recursive median split along the widest axis into groups of at most `max` points.
pub fn split_patches(points: &[Point3], max: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut stack = vec![(0..points.len()).collect::<Vec<usize>>()];
    while let Some(mut idx) = stack.pop() {
        if idx.len() <= max {
            if !idx.is_empty() {
                out.push(idx);
            }
            continue;
        }
        let axis = (0..3)
            .max_by(|&a, &b| {
                let span = |ax: usize| {
                    let (lo, hi) = idx.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &j| {
                        (lo.min(points[j][ax]), hi.max(points[j][ax]))
                    });
                    hi - lo
                };
                span(a).total_cmp(&span(b))
            })
            .unwrap();
        idx.sort_by(|&a, &b| points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b)));
        let right = idx.split_off(idx.len() / 2);
        stack.push(right);
        stack.push(idx);
    }
    out.sort();
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Sphere,
    Box,
    Cylinder,
    Cone,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [ShapeKind::Sphere, ShapeKind::Box, ShapeKind::Cylinder, ShapeKind::Cone];
}

/// `n` surface samples of a randomly sized and rotated primitive centred near the origin.
pub fn primitive_shape(kind: ShapeKind, n: usize, r: &mut rng::Rng) -> Vec<Point3> {
    let normal = |r: &mut rng::Rng| -> f64 { StandardNormal.sample(r) };
    let mut pts: Vec<Point3> = match kind {
        ShapeKind::Sphere => {
            let rad = r.random_range(0.5..0.9);
            (0..n)
                .map(|_| {
                    let v = [normal(r), normal(r), normal(r)];
                    let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-12);
                    v.map(|c| c / len * rad)
                })
                .collect()
        }
        ShapeKind::Box => {
            let h = [r.random_range(0.3..0.8), r.random_range(0.3..0.8), r.random_range(0.3..0.8)];
            let areas = [h[1] * h[2], h[0] * h[2], h[0] * h[1]];
            let total: f64 = areas.iter().sum();
            (0..n)
                .map(|_| {
                    let pick = r.random_range(0.0..total);
                    let axis = if pick < areas[0] {
                        0
                    } else if pick < areas[0] + areas[1] {
                        1
                    } else {
                        2
                    };
                    let mut p: Point3 = std::array::from_fn(|a| r.random_range(-h[a]..h[a]));
                    p[axis] = if r.random_bool(0.5) { h[axis] } else { -h[axis] };
                    p
                })
                .collect()
        }
        ShapeKind::Cylinder => {
            let rad = r.random_range(0.3..0.7);
            let hh = r.random_range(0.3..0.9);
            let side = 2.0 * PI * rad * 2.0 * hh;
            let cap = PI * rad * rad;
            (0..n)
                .map(|_| {
                    let t = r.random_range(0.0..2.0 * PI);
                    if r.random_range(0.0..side + 2.0 * cap) < side {
                        [rad * t.cos(), rad * t.sin(), r.random_range(-hh..hh)]
                    } else {
                        let rr = rad * r.random_range(0.0f64..1.0).sqrt();
                        let z = if r.random_bool(0.5) { hh } else { -hh };
                        [rr * t.cos(), rr * t.sin(), z]
                    }
                })
                .collect()
        }
        ShapeKind::Cone => {
            let rad: f64 = r.random_range(0.4..0.8);
            let height: f64 = r.random_range(0.6..1.4);
            let slant = (rad * rad + height * height).sqrt();
            let side = PI * rad * slant;
            let base = PI * rad * rad;
            (0..n)
                .map(|_| {
                    let t = r.random_range(0.0..2.0 * PI);
                    let u = r.random_range(0.0f64..1.0).sqrt();
                    if r.random_range(0.0..side + base) < side {
                        // u = distance fraction from the apex
                        let rr = rad * u;
                        [rr * t.cos(), rr * t.sin(), height / 2.0 - height * u]
                    } else {
                        [rad * u * t.cos(), rad * u * t.sin(), -height / 2.0]
                    }
                })
                .collect()
        }
    };
    let angle = r.random_range(0.0..2.0 * PI);
    let aug = Augmentation { angle, scale: 1.0 };
    for p in pts.iter_mut() {
        *p = aug.apply(p);
    }
    pts
}

/// `count` shapes cycling through `kinds`, `n` points each.
pub fn shape_family(kinds: &[ShapeKind], count: usize, n: usize, seed: u64) -> Vec<Vec<Point3>> {
    let mut r = rng::substream(seed, "shape-family");
    (0..count)
        .map(|i| primitive_shape(kinds[i % kinds.len()], n, &mut r))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::chamfer;

    fn small_config() -> DecoderConfig {
        DecoderConfig {
            latent_dim: 4,
            coarse_points: 16,
            encoder_hidden: 8,
            global_dim: 8,
            decoder_hidden: 16,
            knn: 6,
            ..Default::default()
        }
    }

    #[test]
    fn zero_model_decodes_to_origin_and_repeats_children() {
        let m = DecoderModel::new(small_config(), 1).zeroed();
        let coarse = m.decode_coarse(&[0.3; 4], &[1.0; 8]).unwrap();
        assert!(coarse.iter().all(|p| *p == [0.0; 3]));
        let kept = vec![[0.1, 0.2, 0.3], [1.0, 0.0, 0.0]];
        let input: Vec<Point3> = (0..10).map(|i| [i as f64 * 0.1, 0.0, 0.05]).collect();
        let fine = m.enhance(&kept, &input).unwrap();
        assert_eq!(fine.len(), 8);
        for (i, p) in fine.iter().enumerate() {
            assert_eq!(*p, kept[i / UPSAMPLE]);
        }
    }

    #[test]
    fn encode_is_permutation_and_duplication_invariant() {
        let m = DecoderModel::new(small_config(), 2);
        let pts = shape_family(&ShapeKind::ALL, 1, 64, 3).remove(0);
        let (g, lat) = m.encode(&pts, LatentPath::Prior).unwrap();
        let mut rev = pts.clone();
        rev.reverse();
        let (g2, lat2) = m.encode(&rev, LatentPath::Prior).unwrap();
        let mut dup = pts.clone();
        dup.extend(pts.iter().copied());
        let (g3, _) = m.encode(&dup, LatentPath::Prior).unwrap();
        for i in 0..g.len() {
            assert!((g[i] - g2[i]).abs() < 1e-9);
            assert_eq!(g[i], g3[i]);
        }
        for i in 0..lat.dim() {
            assert!((lat.mean[i] - lat2.mean[i]).abs() < 1e-9);
            assert!(lat.deviation[i] > 0.0);
        }
        assert!(m.encode(&[], LatentPath::Posterior).is_err());
    }

    #[test]
    fn restore_requires_training_and_keeps_count() {
        let mut m = DecoderModel::new(small_config(), 2);
        let pts = shape_family(&ShapeKind::ALL, 1, 50, 3).remove(0);
        assert!(matches!(m.restore(&pts), Err(Error::State(_))));
        m.trained = true;
        let a = m.restore(&pts).unwrap();
        assert_eq!(a.len(), 4 * 16);
        assert_eq!(a, m.restore(&pts).unwrap());
        assert_eq!(m.restore(&pts[..5]).unwrap().len(), 64);
    }

    #[test]
    fn restore_is_rotation_equivariant() {
        let mut m = DecoderModel::new(small_config(), 4);
        m.trained = true;
        let pts = shape_family(&[ShapeKind::Box], 1, 80, 5).remove(0);
        let rot = Augmentation { angle: 0.9, scale: 1.0 };
        let a: Vec<Point3> = m.restore(&pts).unwrap().iter().map(|p| rot.apply(p)).collect();
        let rotated: Vec<Point3> = pts.iter().map(|p| rot.apply(p)).collect();
        let b = m.restore(&rotated).unwrap();
        assert!(chamfer(&a, &b).unwrap() < 1e-3);
    }

    #[test]
    fn fps_spreads_and_cycles() {
        let pts = [[0.0; 3], [0.1, 0.0, 0.0], [5.0, 0.0, 0.0], [2.6, 0.0, 0.0]];
        assert_eq!(farthest_point_sample(&pts, 3), [0, 2, 3]);
        assert_eq!(farthest_point_sample(&pts[..2], 5), [0, 1, 0, 1, 0]);
    }

    #[test]
    fn perturbation_identity_and_determinism() {
        let cloud = LabeledCloud::new(vec![[1.0, 2.0, 3.0], [-1.0, 0.5, 0.0]], vec![1, 2]).unwrap();
        let same = perturb_and_augment_with(&cloud, 0.0, &AugmentBounds::identity(), 3).unwrap();
        assert_eq!(same, cloud);
        assert_eq!(
            perturb_and_augment(&cloud, 0.05, 9).unwrap(),
            perturb_and_augment(&cloud, 0.05, 9).unwrap()
        );
    }

    #[test]
    fn enhance_gradients_match_finite_differences() {
        let m = DecoderModel::new(small_config(), 6);
        let mut r = rng::seeded(1);
        let input: Vec<Point3> = (0..30)
            .map(|_| std::array::from_fn(|_| r.random_range(-1.0..1.0)))
            .collect();
        let coarse = Mat::from_shape_fn((5, 3), |_| r.random_range(-1.0..1.0));
        let sel = vec![Selected::Coarse(0), Selected::Input(3), Selected::Coarse(4), Selected::Coarse(2)];
        let dirs = m.attn_dirs.to_mat() * 0.3;
        let gates = Mat::from_shape_vec((1, 4), vec![0.9, 1.1, 0.4, 1.3]).unwrap();
        let weights = Mat::from_shape_fn((16, 3), |_| r.random_range(-1.0..1.0));
        let op = Rc::new(EnhanceOp::new(&input, sel, 6, 0.5));
        let loss = |c: &Mat, d: &Mat, g: &Mat| (op.forward(&[c, d, g]).0 * &weights).sum();
        let mut tape = Tape::new();
        let vc = tape.leaf(coarse.clone(), true);
        let vd = tape.leaf(dirs.clone(), true);
        let vg = tape.leaf(gates.clone(), true);
        let out = tape.fused(op.clone(), &[vc, vd, vg]);
        let w = tape.constant(weights.clone());
        let prod = tape.mul(out, w);
        let l = tape.sum(prod);
        let grads = tape.backward(l).unwrap();
        let h = 1e-6;
        let check = |analytic: &Mat, base: &Mat, f: &dyn Fn(&Mat) -> f64| {
            for idx in 0..base.len() {
                let ij = (idx / base.ncols(), idx % base.ncols());
                let mut p = base.clone();
                p[ij] += h;
                let mut q = base.clone();
                q[ij] -= h;
                let num = (f(&p) - f(&q)) / (2.0 * h);
                assert!((analytic[ij] - num).abs() < 1e-6 * (1.0 + num.abs()), "{} vs {num}", analytic[ij]);
            }
        };
        check(grads.get(vc).unwrap(), &coarse, &|c| loss(c, &dirs, &gates));
        check(grads.get(vd).unwrap(), &dirs, &|d| loss(&coarse, d, &gates));
        check(grads.get(vg).unwrap(), &gates, &|g| loss(&coarse, &dirs, g));
    }

    #[test]
    fn kl_weight_zero_leaves_prior_head_untouched() {
        let m = DecoderModel::new(small_config(), 7);
        let shape = shape_family(&ShapeKind::ALL, 1, 60, 8).remove(0);
        let cfg = DecoderTrainConfig {
            lambda_kl: 0.0,
            ..Default::default()
        };
        let step = decoder_step(&m, &shape, &cfg, 1).unwrap();
        // tensors 4 and 5 are the prior head
        assert!(step.grads[4].iter().all(|&v| v == 0.0));
        assert!(step.grads[5].iter().all(|&v| v == 0.0));
        let with_kl = decoder_step(&m, &shape, &DecoderTrainConfig::default(), 1).unwrap();
        assert!(with_kl.grads[4].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.ckpt");
        let mut m = DecoderModel::new(small_config(), 9);
        m.trained = true;
        m.reference_radius = 0.625;
        m.save(&path).unwrap();
        assert_eq!(DecoderModel::load(&path).unwrap(), m);
    }

    #[test]
    fn label_fusion_radius() {
        let src = [[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        let (l, v) = fuse_labels(
            &[[0.1, 0.0, 0.0], [0.9, 0.0, 0.0], [2.5, 0.0, 0.0]],
            &src,
            &[4, 5, 6],
            &[true, false, true],
            0.3,
        )
        .unwrap();
        assert_eq!(l, [4, 0, 0]);
        assert_eq!(v, [true, false, false]);
    }

    #[test]
    fn patches_partition_the_scene() {
        let mut r = rng::seeded(2);
        let pts: Vec<Point3> = (0..1000)
            .map(|_| std::array::from_fn(|_| r.random_range(-10.0..10.0)))
            .collect();
        let patches = split_patches(&pts, 128);
        let mut all: Vec<usize> = patches.iter().flatten().copied().collect();
        all.sort();
        assert_eq!(all, (0..1000).collect::<Vec<_>>());
        assert!(patches.iter().all(|p| p.len() <= 128 && p.len() >= 64));
    }
}
