//! Central-difference verification of tape gradients.

use rand::Rng as _;

use super::net::{Parameterized, PointFeatures, SegModel};
use super::tape::{Mat, Tape, Var};
use crate::error::Result;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub h: f64,
    /// Passing requires `max_rel_error < tolerance`, so a tolerance of 0 never passes.
    pub tolerance: f64,
    /// Entries checked, split evenly between coordinates and parameters.
    pub samples: usize,
    /// Denominator floor of the relative error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-4,
            tolerance: 1e-4,
            samples: 64,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Entry {
    Coord { row: usize, col: usize },
    Param { tensor: usize, index: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<Entry>,
    /// Smallest |pre-activation| of any hidden unit; near zero means a relu kink.
    pub min_abs_preactivation: f64,
    pub passed: bool,
}

fn build(
    tape: &mut Tape,
    model: &SegModel,
    coords: &Mat,
    context: &Mat,
    params: &[Mat],
    loss: &dyn Fn(&mut Tape, Var) -> Var,
) -> (Var, Var, Vec<Var>, f64) {
    let x = tape.leaf(coords.clone(), true);
    let ctx = tape.constant(context.clone());
    let mut h = tape.concat_cols(&[x, ctx]);
    let mut leaves = Vec::with_capacity(params.len());
    let mut min_pre = f64::INFINITY;
    let last = model.layers.len() - 1;
    for i in 0..model.layers.len() {
        let w = tape.leaf(params[2 * i].clone(), true);
        let b = tape.leaf(params[2 * i + 1].clone(), true);
        leaves.extend([w, b]);
        h = tape.affine(h, w, b);
        if i < last {
            min_pre = tape
                .value(h)
                .iter()
                .fold(min_pre, |m, v| m.min(v.abs()));
            h = tape.relu(h);
        }
    }
    let l = loss(tape, h);
    (l, x, leaves, min_pre)
}

fn evaluate(
    model: &SegModel,
    coords: &Mat,
    context: &Mat,
    params: &[Mat],
    loss: &dyn Fn(&mut Tape, Var) -> Var,
) -> f64 {
    let mut tape = Tape::new();
    let (l, ..) = build(&mut tape, model, coords, context, params, loss);
    tape.scalar(l)
}

/// Compares tape gradients with central differences on a seeded random
/// subset of coordinate and unfrozen parameter entries. Parameters are
/// perturbed in double precision, independent of their single-precision storage.
pub fn finite_diff_check(
    model: &SegModel,
    feats: &PointFeatures,
    loss: &dyn Fn(&mut Tape, Var) -> Var,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    model.validate()?;
    let params: Vec<Mat> = model.params().iter().map(|p| p.to_mat()).collect();
    let frozen: Vec<bool> = model.params().iter().map(|p| p.frozen).collect();
    let mut tape = Tape::new();
    let (l, x, leaves, min_pre) = build(&mut tape, model, &feats.coords, &feats.context, &params, loss);
    let grads = tape.backward(l)?;

    let mut r = rng::substream(cfg.seed, "gradcheck");
    let mut entries = Vec::new();
    let n_coord = feats.coords.len();
    if n_coord > 0 {
        let cols = feats.coords.ncols();
        for _ in 0..cfg.samples.div_ceil(2) {
            let k = r.random_range(0..n_coord);
            entries.push(Entry::Coord {
                row: k / cols,
                col: k % cols,
            });
        }
    }
    let trainable: Vec<usize> = (0..params.len()).filter(|&t| !frozen[t]).collect();
    if !trainable.is_empty() {
        while entries.len() < cfg.samples {
            let t = trainable[r.random_range(0..trainable.len())];
            entries.push(Entry::Param {
                tensor: t,
                index: r.random_range(0..params[t].len()),
            });
        }
    }

    let mut max_err: f64 = 0.0;
    let mut worst = None;
    for e in &entries {
        let (analytic, numeric) = match *e {
            Entry::Coord { row, col } => {
                let a = grads.get_or_zeros(x, feats.coords.dim())[[row, col]];
                let mut plus = feats.coords.clone();
                plus[[row, col]] += cfg.h;
                let mut minus = feats.coords.clone();
                minus[[row, col]] -= cfg.h;
                let fp = evaluate(model, &plus, &feats.context, &params, loss);
                let fm = evaluate(model, &minus, &feats.context, &params, loss);
                (a, (fp - fm) / (2.0 * cfg.h))
            }
            Entry::Param { tensor, index } => {
                let shape = params[tensor].dim();
                let (i, j) = (index / shape.1, index % shape.1);
                let a = grads.get_or_zeros(leaves[tensor], shape)[[i, j]];
                let mut p = params.clone();
                p[tensor][[i, j]] += cfg.h;
                let fp = evaluate(model, &feats.coords, &feats.context, &p, loss);
                p[tensor][[i, j]] -= 2.0 * cfg.h;
                let fm = evaluate(model, &feats.coords, &feats.context, &p, loss);
                (a, (fp - fm) / (2.0 * cfg.h))
            }
        };
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(cfg.floor);
        if !(err <= max_err) {
            max_err = err;
            worst = Some(e.clone());
        }
    }
    Ok(GradCheckReport {
        checked: entries.len(),
        max_rel_error: max_err,
        worst,
        min_abs_preactivation: min_pre,
        passed: max_err < cfg.tolerance,
    })
}
