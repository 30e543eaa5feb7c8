//! One-dimensional Bayesian optimization on `[0, 1]` with a Gaussian process
//! and expected improvement.

use rand::Rng as _;
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::rng;

/// RBF kernel hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kernel {
    pub length_scale: f64,
    pub signal_variance: f64,
    pub noise_variance: f64,
}

impl Default for Kernel {
    fn default() -> Self {
        Self {
            length_scale: 0.2,
            signal_variance: 1.0,
            noise_variance: 1e-6,
        }
    }
}

impl Kernel {
    pub fn eval(&self, a: f64, b: f64) -> f64 {
        let d = (a - b) / self.length_scale;
        self.signal_variance * (-0.5 * d * d).exp()
    }
}

/// Observations, kernel and search settings.
#[derive(Debug, Clone, PartialEq)]
pub struct BoState {
    /// `(lambda, objective)` pairs.
    pub observations: Vec<(f64, f64)>,
    pub kernel: Kernel,
    pub grid_points: usize,
    pub budget: usize,
}

impl BoState {
    pub fn new(kernel: Kernel) -> Self {
        Self {
            observations: Vec::new(),
            kernel,
            grid_points: 1001,
            budget: 20,
        }
    }

    pub fn observe(&mut self, lambda: f64, value: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&lambda) || !value.is_finite() {
            return Err(Error::arg("observation outside [0, 1] or non-finite"));
        }
        self.observations.push((lambda, value));
        Ok(())
    }

    /// Best observed value.
    pub fn incumbent(&self) -> Option<(f64, f64)> {
        self.observations
            .iter()
            .copied()
            .fold(None, |best, o| match best {
                Some((_, v)) if v >= o.1 => best,
                _ => Some(o),
            })
    }

    fn prior_mean(&self) -> f64 {
        self.observations.iter().map(|o| o.1).sum::<f64>() / self.observations.len() as f64
    }
}

/// Lower-triangular Cholesky factor, or `None` if not positive definite.
fn cholesky(a: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let d = a[i][i] - s;
                if !(d > 0.0) {
                    return None;
                }
                l[i][i] = d.sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    Some(l)
}

fn forward_sub(l: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let mut x = vec![0.0; b.len()];
    for i in 0..b.len() {
        let s: f64 = (0..i).map(|k| l[i][k] * x[k]).sum();
        x[i] = (b[i] - s) / l[i][i];
    }
    x
}

fn backward_sub(l: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l[k][i] * x[k]).sum();
        x[i] = (b[i] - s) / l[i][i];
    }
    x
}

/// Factorized kernel matrix of the observations.
struct Fit {
    chol: Vec<Vec<f64>>,
    /// `K^-1 (y - mean)`.
    alpha: Vec<f64>,
    mean: f64,
}

fn fit(state: &BoState, kernel: &Kernel) -> Result<Fit> {
    if state.observations.is_empty() {
        return Err(Error::arg("posterior needs at least one observation"));
    }
    let xs: Vec<f64> = state.observations.iter().map(|o| o.0).collect();
    let mean = state.prior_mean();
    let y: Vec<f64> = state.observations.iter().map(|o| o.1 - mean).collect();
    let n = xs.len();
    let mut jitter = 1e-8;
    for _ in 0..8 {
        let k: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| kernel.eval(xs[i], xs[j]) + if i == j { kernel.noise_variance + jitter } else { 0.0 })
                    .collect()
            })
            .collect();
        if let Some(chol) = cholesky(&k) {
            let alpha = backward_sub(&chol, &forward_sub(&chol, &y));
            return Ok(Fit { chol, alpha, mean });
        }
        jitter *= 100.0;
    }
    Err(Error::numeric("gaussian process", "kernel matrix not positive definite after jitter"))
}

fn predict(state: &BoState, kernel: &Kernel, f: &Fit, x: f64) -> (f64, f64) {
    let ks: Vec<f64> = state.observations.iter().map(|o| kernel.eval(x, o.0)).collect();
    let mean = f.mean + ks.iter().zip(&f.alpha).map(|(a, b)| a * b).sum::<f64>();
    let v = forward_sub(&f.chol, &ks);
    let var = kernel.eval(x, x) - v.iter().map(|a| a * a).sum::<f64>();
    (mean, var.max(0.0))
}

/// Posterior mean and variance of the latent objective at `lambda`.
pub fn gp_posterior(state: &BoState, lambda: f64) -> Result<(f64, f64)> {
    let f = fit(state, &state.kernel)?;
    Ok(predict(state, &state.kernel, &f, lambda))
}

/// Closed-form expected improvement over the incumbent for maximization.
pub fn expected_improvement_at(mean: f64, variance: f64, incumbent: f64) -> f64 {
    let sigma = variance.max(0.0).sqrt();
    if sigma < 1e-12 {
        return 0.0;
    }
    let std = Normal::new(0.0, 1.0).unwrap();
    let z = (mean - incumbent) / sigma;
    ((mean - incumbent) * std.cdf(z) + sigma * std.pdf(z)).max(0.0)
}

pub fn expected_improvement(state: &BoState, lambda: f64) -> Result<f64> {
    let (mean, var) = gp_posterior(state, lambda)?;
    let best = state.incumbent().map(|o| o.1).unwrap_or(f64::NEG_INFINITY);
    Ok(expected_improvement_at(mean, var, best))
}

/// Log marginal likelihood of the observations under `kernel`.
pub fn log_marginal_likelihood(state: &BoState, kernel: &Kernel) -> Result<f64> {
    let f = fit(state, kernel)?;
    let y: Vec<f64> = state.observations.iter().map(|o| o.1 - f.mean).collect();
    let data: f64 = y.iter().zip(&f.alpha).map(|(a, b)| a * b).sum();
    let logdet: f64 = f.chol.iter().enumerate().map(|(i, r)| r[i].ln()).sum();
    Ok(-0.5 * data - logdet - 0.5 * y.len() as f64 * (2.0 * std::f64::consts::PI).ln())
}

/// Kernel with the highest marginal likelihood on a fixed grid.
pub fn fit_kernel(state: &BoState) -> Result<Kernel> {
    let n = state.observations.len() as f64;
    let mean = state.prior_mean();
    let var = state.observations.iter().map(|o| (o.1 - mean).powi(2)).sum::<f64>() / n;
    let base = if var > 1e-12 { var } else { 1.0 };
    let mut best: Option<(f64, Kernel)> = None;
    for &length_scale in &[0.05, 0.1, 0.2, 0.3, 0.5, 1.0] {
        for &sv in &[0.5, 1.0, 2.0, 4.0] {
            for &nv in &[1e-6, 1e-4, 1e-2] {
                let k = Kernel {
                    length_scale,
                    signal_variance: sv * base,
                    noise_variance: nv * base,
                };
                let Ok(ll) = log_marginal_likelihood(state, &k) else {
                    continue;
                };
                if best.is_none_or(|(b, _)| ll > b) {
                    best = Some((ll, k));
                }
            }
        }
    }
    best.map(|b| b.1)
        .ok_or_else(|| Error::numeric("gaussian process", "no kernel on the grid could be factorized"))
}

/// One evaluation of the search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoEval {
    pub lambda: f64,
    /// Value returned by the objective (may be non-finite).
    pub value: f64,
    /// Value given to the surrogate.
    pub recorded: f64,
    pub failed: bool,
    /// Best recorded value so far.
    pub incumbent: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoResult {
    pub best_lambda: f64,
    pub best_value: f64,
    pub trace: Vec<BoEval>,
}

impl BoResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,lambda,value,recorded,failed,incumbent\n");
        for (i, e) in self.trace.iter().enumerate() {
            s += &format!(
                "{},{:?},{:?},{:?},{},{:?}\n",
                i + 1,
                e.lambda,
                e.value,
                e.recorded,
                e.failed,
                e.incumbent
            );
        }
        s
    }
}

/// Maximizes `objective` over `[0, 1]` with `budget` evaluations.
///
/// Starts from `{0, 0.5, 1}`, then queries the grid point of highest expected
/// improvement. Points where the acquisition is flat are replaced by a seeded
/// draw among unvisited grid points. Non-finite values are recorded as
/// failures one unit below the worst finite value seen.
pub fn optimize_lambda(objective: &mut dyn FnMut(f64) -> f64, budget: usize, seed: u64) -> Result<BoResult> {
    if budget == 0 {
        return Err(Error::arg("budget must be positive"));
    }
    let grid_points = 1001;
    let grid: Vec<f64> = (0..grid_points).map(|i| i as f64 / (grid_points - 1) as f64).collect();
    let mut visited = vec![false; grid_points];
    let mut r = rng::substream(seed, "bayes-opt");
    let mut state = BoState::new(Kernel::default());
    let mut trace: Vec<BoEval> = Vec::with_capacity(budget);
    let initial = [0usize, grid_points / 2, grid_points - 1];
    for step in 0..budget {
        let gi = if step < initial.len() {
            initial[step]
        } else {
            state.kernel = fit_kernel(&state)?;
            let f = fit(&state, &state.kernel)?;
            let best = state.incumbent().map(|o| o.1).unwrap_or(0.0);
            let mut pick: Option<(usize, f64)> = None;
            for (i, &x) in grid.iter().enumerate() {
                if visited[i] {
                    continue;
                }
                let (m, v) = predict(&state, &state.kernel, &f, x);
                let ei = expected_improvement_at(m, v, best);
                if pick.is_none_or(|(_, b)| ei > b) {
                    pick = Some((i, ei));
                }
            }
            match pick {
                Some((i, ei)) if ei > 1e-12 => i,
                Some(_) => {
                    let open: Vec<usize> = (0..grid_points).filter(|&i| !visited[i]).collect();
                    open[r.random_range(0..open.len())]
                }
                None => break,
            }
        };
        visited[gi] = true;
        let lambda = grid[gi];
        let value = objective(lambda);
        let failed = !value.is_finite();
        let recorded = if failed {
            state
                .observations
                .iter()
                .map(|o| o.1)
                .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.min(v))))
                .map_or(-1.0, |m| m - 1.0)
        } else {
            value
        };
        state.observe(lambda, recorded)?;
        trace.push(BoEval {
            lambda,
            value,
            recorded,
            failed,
            incumbent: state.incumbent().unwrap().1,
        });
    }
    let (best_lambda, best_value) = state.incumbent().unwrap();
    Ok(BoResult {
        best_lambda,
        best_value,
        trace,
    })
}
