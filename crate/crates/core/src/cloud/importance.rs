use super::{LabeledCloud, Point3, SpatialIndex};
use crate::error::{Error, Result};

/// Eigen-decomposition of a symmetric 3x3 matrix by cyclic Jacobi sweeps.
///
/// Returns eigenvalues in descending order with matching unit eigenvectors
/// (`vectors[i]` belongs to `values[i]`).
pub fn covariance_eigen(m: [[f64; 3]; 3]) -> ([f64; 3], [[f64; 3]; 3]) {
    let mut a = m;
    let mut v = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    for _ in 0..50 {
        let off = a[0][1].powi(2) + a[0][2].powi(2) + a[1][2].powi(2);
        let scale = a[0][0].powi(2) + a[1][1].powi(2) + a[2][2].powi(2);
        if off <= 1e-30 * scale.max(1e-300) {
            break;
        }
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            if a[p][q] == 0.0 {
                continue;
            }
            let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let t = if theta == 0.0 { 1.0 } else { t };
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            // A <- J^T A J
            for k in 0..3 {
                let akp = a[k][p];
                let akq = a[k][q];
                a[k][p] = c * akp - s * akq;
                a[k][q] = s * akp + c * akq;
            }
            for k in 0..3 {
                let apk = a[p][k];
                let aqk = a[q][k];
                a[p][k] = c * apk - s * aqk;
                a[q][k] = s * apk + c * aqk;
            }
            for row in v.iter_mut() {
                let vp = row[p];
                let vq = row[q];
                row[p] = c * vp - s * vq;
                row[q] = s * vp + c * vq;
            }
        }
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| a[j][j].total_cmp(&a[i][i]));
    let values = order.map(|i| a[i][i]);
    let vectors = order.map(|i| [v[0][i], v[1][i], v[2][i]]);
    (values, vectors)
}

/// Covariance of a neighborhood; `None` when the neighborhood is a single location.
pub(crate) fn covariance(points: &[Point3], members: impl Iterator<Item = usize> + Clone) -> [[f64; 3]; 3] {
    let mut mean = [0.0; 3];
    let mut n = 0.0;
    for i in members.clone() {
        for a in 0..3 {
            mean[a] += points[i][a];
        }
        n += 1.0;
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    let mut cov = [[0.0; 3]; 3];
    for i in members {
        let d = [
            points[i][0] - mean[0],
            points[i][1] - mean[1],
            points[i][2] - mean[2],
        ];
        for r in 0..3 {
            for c in r..3 {
                cov[r][c] += d[r] * d[c];
            }
        }
    }
    for r in 0..3 {
        for c in r..3 {
            cov[r][c] /= n;
            cov[c][r] = cov[r][c];
        }
    }
    cov
}

/// Descending eigenvalues and the smallest-eigenvalue direction (surface
/// normal) of each point's k-NN covariance; the point itself is included.
pub fn local_eigenvalues(index: &SpatialIndex, k: usize) -> Vec<([f64; 3], Point3)> {
    let pts = index.points();
    pts.iter()
        .map(|p| {
            let nn = index.knn_unchecked(p, k);
            let cov = covariance(pts, nn.iter().map(|n| n.ordinal));
            let (vals, vecs) = covariance_eigen(cov);
            (vals.map(|v| v.max(0.0)), vecs[2])
        })
        .collect()
}

/// Surface-variation score `l3 / (l1 + l2 + l3)` of each point's k-NN
/// covariance, min-max rescaled to `[0, 1]` over the cloud.
pub fn geometric_importance(cloud: &LabeledCloud, k: usize) -> Result<Vec<f64>> {
    if k < 3 || cloud.len() <= k {
        return Err(Error::arg(format!(
            "geometric importance needs N > k >= 3 (N={}, k={k})",
            cloud.len()
        )));
    }
    let index = SpatialIndex::build(cloud);
    let raw: Vec<f64> = local_eigenvalues(&index, k)
        .into_iter()
        .map(|(l, _)| {
            let sum = l[0] + l[1] + l[2];
            // degenerate neighborhoods (all coincident) score zero
            if sum <= 1e-18 {
                0.0
            } else {
                l[2] / sum
            }
        })
        .collect();
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    Ok(raw
        .into_iter()
        .map(|v| if span > 1e-12 { (v - lo) / span } else { 0.0 })
        .collect())
}
