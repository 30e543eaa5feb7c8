//! Point-cloud data model and geometric utilities.

mod importance;
mod index;
pub mod io;
mod sor;
mod stats;
pub mod synth;

pub use importance::{covariance_eigen, geometric_importance, local_eigenvalues};
pub use index::{knn_brute_force, Neighbor, SpatialIndex};
pub use sor::statistical_outlier_removal;
pub use stats::{class_histogram, ClassStats};
pub use synth::{synth_scene, ClassSpec, Primitive, SceneLayout, SceneSpec};

use crate::error::{Error, Result};

pub type Point3 = [f64; 3];

/// A scan: coordinates, optional reflectance and per-point class ids.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCloud {
    pub points: Vec<Point3>,
    pub intensity: Option<Vec<f32>>,
    pub labels: Vec<u32>,
    /// Sensor origin in the scan frame.
    pub viewpoint: Point3,
    /// Set when the scan was loaded without a label file.
    pub unlabeled: bool,
}

impl LabeledCloud {
    pub fn new(points: Vec<Point3>, labels: Vec<u32>) -> Result<Self> {
        Self::with_intensity(points, labels, None)
    }

    pub fn with_intensity(
        points: Vec<Point3>,
        labels: Vec<u32>,
        intensity: Option<Vec<f32>>,
    ) -> Result<Self> {
        if points.len() != labels.len() {
            return Err(Error::arg(format!(
                "{} points but {} labels",
                points.len(),
                labels.len()
            )));
        }
        if let Some(int) = &intensity {
            if int.len() != points.len() {
                return Err(Error::arg(format!(
                    "{} points but {} intensity values",
                    points.len(),
                    int.len()
                )));
            }
        }
        if let Some(ordinal) = points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::Data {
                ordinal,
                message: "non-finite coordinate".into(),
            });
        }
        Ok(Self {
            points,
            intensity,
            labels,
            viewpoint: [0.0; 3],
            unlabeled: false,
        })
    }

    pub fn empty() -> Self {
        Self {
            points: Vec::new(),
            intensity: None,
            labels: Vec::new(),
            viewpoint: [0.0; 3],
            unlabeled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn with_viewpoint(mut self, viewpoint: Point3) -> Self {
        self.viewpoint = viewpoint;
        self
    }

    /// Keeps the points whose mask entry is set, preserving order.
    pub fn select_mask(&self, keep: &[bool]) -> Self {
        let idx: Vec<usize> = keep
            .iter()
            .enumerate()
            .filter_map(|(i, &k)| k.then_some(i))
            .collect();
        self.select(&idx)
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            intensity: self
                .intensity
                .as_ref()
                .map(|int| indices.iter().map(|&i| int[i]).collect()),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            viewpoint: self.viewpoint,
            unlabeled: self.unlabeled,
        }
    }

    /// Applies `f` to every point and the viewpoint.
    pub fn transformed(&self, f: impl Fn(Point3) -> Point3) -> Self {
        Self {
            points: self.points.iter().map(|&p| f(p)).collect(),
            viewpoint: f(self.viewpoint),
            ..self.clone()
        }
    }
}

/// Euclidean distance of every point to the cloud's viewpoint.
pub fn viewpoint_distances(cloud: &LabeledCloud) -> Vec<f64> {
    cloud
        .points
        .iter()
        .map(|p| distance(p, &cloud.viewpoint))
        .collect()
}

#[inline]
pub fn distance_sq(a: &Point3, b: &Point3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[inline]
pub fn distance(a: &Point3, b: &Point3) -> f64 {
    distance_sq(a, b).sqrt()
}
