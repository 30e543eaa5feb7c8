//! Compact per-point segmentation network.
//!
//! Each point is described by its scaled coordinates, its range to the
//! sensor and a summary of its k-NN covariance. A small MLP maps that
//! feature vector to class logits. Only the coordinate columns are
//! differentiable inputs; the range and covariance columns are recomputed
//! from the (possibly perturbed) cloud and treated as constants.

use ndarray::{Array2, Axis};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::tape::{Mat, Tape, Var};
use crate::cloud::{local_eigenvalues, viewpoint_distances, LabeledCloud, SpatialIndex};
use crate::error::{Error, Result};
use crate::rng;

/// A parameter array stored in single precision.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
    pub frozen: bool,
}

impl ParamTensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
            frozen: false,
        }
    }

    pub fn from_mat(m: &Mat) -> Self {
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data: m.iter().map(|&v| v as f32).collect(),
            frozen: false,
        }
    }

    pub fn to_mat(&self) -> Mat {
        Array2::from_shape_vec(
            (self.rows, self.cols),
            self.data.iter().map(|&v| v as f64).collect(),
        )
        .expect("shape matches data")
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Records this tensor on the tape; frozen tensors become constants.
    pub fn record(&self, tape: &mut Tape, trainable: bool) -> Var {
        tape.leaf(self.to_mat(), trainable && !self.frozen)
    }
}

/// Anything with an ordered list of parameter tensors.
pub trait Parameterized {
    fn params(&self) -> Vec<&ParamTensor>;
    fn params_mut(&mut self) -> Vec<&mut ParamTensor>;

    fn num_parameters(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.params()
            .iter()
            .all(|p| p.data.iter().all(|v| v.is_finite()))
    }
}

/// Fully connected layer `y = x W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: ParamTensor,
    pub bias: ParamTensor,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: ParamTensor::zeros(inputs, outputs),
            bias: ParamTensor::zeros(1, outputs),
        }
    }

    /// He-normal weights, zero bias.
    pub fn init(inputs: usize, outputs: usize, r: &mut rng::Rng) -> Self {
        let std = (2.0 / inputs as f64).sqrt();
        let normal = Normal::new(0.0, std).unwrap();
        let mut layer = Self::zeros(inputs, outputs);
        for w in layer.weight.data.iter_mut() {
            *w = normal.sample(r) as f32;
        }
        layer
    }

    pub fn inputs(&self) -> usize {
        self.weight.rows
    }

    pub fn outputs(&self) -> usize {
        self.weight.cols
    }

    pub fn is_frozen(&self) -> bool {
        self.weight.frozen && self.bias.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.weight.frozen = frozen;
        self.bias.frozen = frozen;
    }

    /// Weight and bias handles on the tape.
    pub fn record(&self, tape: &mut Tape, trainable: bool) -> (Var, Var) {
        (
            self.weight.record(tape, trainable),
            self.bias.record(tape, trainable),
        )
    }
}

/// How per-point features are derived from a cloud.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureRecipe {
    /// Neighborhood size of the covariance summary.
    pub knn: usize,
    /// Coordinates and ranges are divided by this (m).
    pub coord_scale: f64,
}

impl Default for FeatureRecipe {
    fn default() -> Self {
        Self {
            knn: 8,
            coord_scale: 10.0,
        }
    }
}

pub const COORD_FEATURES: usize = 3;
/// range, linearity, planarity, scattering, verticality
pub const CONTEXT_FEATURES: usize = 5;

impl FeatureRecipe {
    pub fn dim(&self) -> usize {
        COORD_FEATURES + CONTEXT_FEATURES
    }

    pub fn compute(&self, cloud: &LabeledCloud) -> PointFeatures {
        let n = cloud.len();
        let mut coords = Mat::zeros((n, COORD_FEATURES));
        for (i, p) in cloud.points.iter().enumerate() {
            for a in 0..3 {
                coords[[i, a]] = p[a] / self.coord_scale;
            }
        }
        let mut context = Mat::zeros((n, CONTEXT_FEATURES));
        let ranges = viewpoint_distances(cloud);
        let index = SpatialIndex::build(cloud);
        let eig = local_eigenvalues(&index, self.knn);
        for i in 0..n {
            context[[i, 0]] = ranges[i] / self.coord_scale;
            let ([l1, l2, l3], normal) = eig[i];
            if l1 + l2 + l3 > 1e-12 {
                context[[i, 1]] = (l1 - l2) / l1;
                context[[i, 2]] = (l2 - l3) / l1;
                context[[i, 3]] = l3 / l1;
                context[[i, 4]] = 1.0 - normal[2].abs();
            }
        }
        PointFeatures { coords, context }
    }
}

/// Precomputed network inputs for one cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct PointFeatures {
    /// Scaled coordinates; the differentiable part.
    pub coords: Mat,
    pub context: Mat,
}

impl PointFeatures {
    pub fn len(&self) -> usize {
        self.coords.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            coords: self.coords.select(Axis(0), rows),
            context: self.context.select(Axis(0), rows),
        }
    }

    /// Full feature matrix, coordinates first.
    pub fn stacked(&self) -> Mat {
        ndarray::concatenate(Axis(1), &[self.coords.view(), self.context.view()]).unwrap()
    }
}

/// Output of [`SegModel::record`].
#[derive(Debug, Clone)]
pub struct Recorded {
    pub logits: Var,
    /// Scaled-coordinate input leaf.
    pub coords: Var,
    /// `(weight, bias)` per layer.
    pub layers: Vec<(Var, Var)>,
}

/// Per-point MLP classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct SegModel {
    pub layers: Vec<Dense>,
    pub num_classes: usize,
    pub recipe: FeatureRecipe,
}

impl Parameterized for SegModel {
    fn params(&self) -> Vec<&ParamTensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

impl SegModel {
    /// Randomly initialized network `features -> hidden... -> num_classes`.
    pub fn new(recipe: FeatureRecipe, hidden: &[usize], num_classes: usize, seed: u64) -> Self {
        let mut r = rng::substream(seed, "segmodel-init");
        let mut dims = vec![recipe.dim()];
        dims.extend_from_slice(hidden);
        dims.push(num_classes);
        let layers = dims
            .windows(2)
            .map(|w| Dense::init(w[0], w[1], &mut r))
            .collect();
        Self {
            layers,
            num_classes,
            recipe,
        }
    }

    /// Default desk-scale shape: features -> 64 -> 64 -> c.
    pub fn default_for(num_classes: usize, seed: u64) -> Self {
        Self::new(FeatureRecipe::default(), &[64, 64], num_classes, seed)
    }

    pub fn zeroed(&self) -> Self {
        let mut m = self.clone();
        for p in m.params_mut() {
            p.data.iter_mut().for_each(|v| *v = 0.0);
        }
        m
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::arg("model has no layers"));
        }
        if self.layers[0].inputs() != self.recipe.dim() {
            return Err(Error::arg(format!(
                "first layer expects {} inputs, feature recipe yields {}",
                self.layers[0].inputs(),
                self.recipe.dim()
            )));
        }
        for (i, w) in self.layers.windows(2).enumerate() {
            if w[0].outputs() != w[1].inputs() {
                return Err(Error::arg(format!("layer {i} -> {} shape mismatch", i + 1)));
            }
        }
        if self.layers.last().unwrap().outputs() != self.num_classes {
            return Err(Error::arg("last layer width differs from class count"));
        }
        Ok(())
    }

    /// Freezes every layer except the last `trainable`.
    pub fn freeze_all_but_last(&mut self, trainable: usize) {
        let n = self.layers.len();
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.set_frozen(i + trainable < n);
        }
    }

    pub fn unfreeze(&mut self) {
        self.layers.iter_mut().for_each(|l| l.set_frozen(false));
    }

    pub fn features(&self, cloud: &LabeledCloud) -> PointFeatures {
        self.recipe.compute(cloud)
    }

    /// Records the forward pass. `train_params` makes unfrozen parameters
    /// differentiable; `coords_grad` makes the coordinate input differentiable.
    pub fn record(
        &self,
        tape: &mut Tape,
        feats: &PointFeatures,
        train_params: bool,
        coords_grad: bool,
    ) -> Result<Recorded> {
        self.validate()?;
        let coords = tape.leaf(feats.coords.clone(), coords_grad);
        let context = tape.constant(feats.context.clone());
        let mut h = tape.concat_cols(&[coords, context]);
        let mut layers = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let (w, b) = layer.record(tape, train_params);
            layers.push((w, b));
            h = tape.affine(h, w, b);
            if i < last {
                h = tape.relu(h);
            }
            if !tape.value(h).iter().all(|v| v.is_finite()) {
                return Err(Error::numeric(
                    format!("layer {i}"),
                    "non-finite activation",
                ));
            }
        }
        Ok(Recorded {
            logits: h,
            coords,
            layers,
        })
    }

    /// Per-point logits (`N x c`).
    pub fn forward(&self, feats: &PointFeatures) -> Result<Mat> {
        self.validate()?;
        let mut h = feats.stacked();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = h.dot(&layer.weight.to_mat()) + &layer.bias.to_mat().row(0);
            if i < last {
                h.mapv_inplace(|v| v.max(0.0));
            }
            if !h.iter().all(|v| v.is_finite()) {
                return Err(Error::numeric(format!("layer {i}"), "non-finite activation"));
            }
        }
        Ok(h)
    }

    pub fn forward_cloud(&self, cloud: &LabeledCloud) -> Result<Mat> {
        self.forward(&self.features(cloud))
    }

    pub fn predict(&self, feats: &PointFeatures) -> Result<Vec<u32>> {
        Ok(argmax_rows(&self.forward(feats)?))
    }

    /// Gradients in [`Parameterized::params`] order; frozen entries are zero.
    pub fn param_grads(&self, rec: &Recorded, grads: &super::Gradients) -> Vec<Mat> {
        rec.layers
            .iter()
            .zip(&self.layers)
            .flat_map(|(&(w, b), l)| {
                [
                    grads.get_or_zeros(w, l.weight.shape()),
                    grads.get_or_zeros(b, l.bias.shape()),
                ]
            })
            .collect()
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Mat) -> Mat {
    let mut p = logits.clone();
    for mut row in p.rows_mut() {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row /= z;
    }
    p
}

/// Index of the largest entry per row; ties go to the lower class id.
pub fn argmax_rows(m: &Mat) -> Vec<u32> {
    m.rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best as u32
        })
        .collect()
}

/// Random subset of `k` distinct rows out of `n` (all rows when `k >= n`).
pub fn sample_rows(n: usize, k: usize, r: &mut rng::Rng) -> Vec<usize> {
    if k >= n {
        return (0..n).collect();
    }
    rand::seq::index::sample(r, n, k).into_vec()
}

/// Gaussian noise of the given standard deviation, used in tests and data generation.
pub fn gaussian_mat(rows: usize, cols: usize, std: f64, r: &mut rng::Rng) -> Mat {
    let normal = Normal::new(0.0, std).unwrap();
    Mat::from_shape_fn((rows, cols), |_| normal.sample(r))
}

/// Uniform matrix in `[lo, hi)`.
pub fn uniform_mat(rows: usize, cols: usize, lo: f64, hi: f64, r: &mut rng::Rng) -> Mat {
    Mat::from_shape_fn((rows, cols), |_| r.random_range(lo..hi))
}
