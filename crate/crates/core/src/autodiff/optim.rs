//! SGD with momentum and Adam over [`Parameterized`] models.
//!
//! Updates are computed in `f64` and written back to `f32` storage. Frozen
//! tensors are skipped entirely, so they stay bit-identical.

use super::net::Parameterized;
use super::tape::Mat;
use crate::error::{Error, Result};

fn check_shapes(model: &impl Parameterized, grads: &[Mat]) -> Result<()> {
    let params = model.params();
    if params.len() != grads.len() {
        return Err(Error::arg(format!(
            "{} parameter tensors but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.dim() {
            return Err(Error::arg(format!(
                "gradient {i} has shape {:?}, parameter has {:?}",
                g.dim(),
                p.shape()
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Default)]
pub struct SgdState {
    velocity: Vec<Vec<f64>>,
}

/// `v <- momentum * v + g; p <- p - lr * v`.
pub fn sgd_step(
    model: &mut impl Parameterized,
    grads: &[Mat],
    lr: f64,
    momentum: f64,
    state: &mut SgdState,
) -> Result<()> {
    check_shapes(model, grads)?;
    if state.velocity.is_empty() {
        state.velocity = model.params().iter().map(|p| vec![0.0; p.len()]).collect();
    }
    for ((p, g), vel) in model.params_mut().into_iter().zip(grads).zip(&mut state.velocity) {
        if p.frozen {
            continue;
        }
        for ((w, &gi), v) in p.data.iter_mut().zip(g.iter()).zip(vel.iter_mut()) {
            *v = momentum * *v + gi;
            *w = (*w as f64 - lr * *v) as f32;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

/// Adam with bias correction.
pub fn adam_step(
    model: &mut impl Parameterized,
    grads: &[Mat],
    state: &mut AdamState,
    hyper: &AdamHyper,
) -> Result<()> {
    check_shapes(model, grads)?;
    if state.m.is_empty() {
        let zeros: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.len()]).collect();
        state.m = zeros.clone();
        state.v = zeros;
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    for (i, (p, g)) in model.params_mut().into_iter().zip(grads).enumerate() {
        if p.frozen {
            continue;
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, (w, &gi)) in p.data.iter_mut().zip(g.iter()).enumerate() {
            m[j] = hyper.beta1 * m[j] + (1.0 - hyper.beta1) * gi;
            v[j] = hyper.beta2 * v[j] + (1.0 - hyper.beta2) * gi * gi;
            let mh = m[j] / bc1;
            let vh = v[j] / bc2;
            *w = (*w as f64 - hyper.lr * mh / (vh.sqrt() + hyper.eps)) as f32;
        }
    }
    Ok(())
}
