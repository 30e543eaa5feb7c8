use super::{LabeledCloud, SpatialIndex};
use crate::error::{Error, Result};

/// Statistical outlier removal.
///
/// A point survives when the mean distance to its `k` nearest neighbors is
/// at most `mean + std_mult * std` of that statistic over the whole cloud.
/// Returns the filtered cloud and the keep mask.
pub fn statistical_outlier_removal(
    cloud: &LabeledCloud,
    k: usize,
    std_mult: f64,
) -> Result<(LabeledCloud, Vec<bool>)> {
    if k == 0 {
        return Err(Error::arg("k must be at least 1"));
    }
    if !(std_mult > 0.0) {
        return Err(Error::arg("std_mult must be positive"));
    }
    if cloud.len() <= k {
        return Err(Error::arg(format!(
            "need more than k={k} points, got {}",
            cloud.len()
        )));
    }
    let index = SpatialIndex::build(cloud);
    let mean_dist: Vec<f64> = index
        .knn_graph(k)
        .iter()
        .map(|nn| nn.iter().map(|n| n.distance).sum::<f64>() / nn.len() as f64)
        .collect();
    let n = mean_dist.len() as f64;
    let mu = mean_dist.iter().sum::<f64>() / n;
    let sigma = (mean_dist.iter().map(|d| (d - mu).powi(2)).sum::<f64>() / n).sqrt();
    let threshold = mu + std_mult * sigma;
    let keep: Vec<bool> = mean_dist.iter().map(|&d| d <= threshold).collect();
    Ok((cloud.select_mask(&keep), keep))
}
