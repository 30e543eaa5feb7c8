//! Desk-scale synthetic LiDAR-like scenes built from labeled primitives.
//!
//! Ground is a disk sampled with range falloff, buildings are box walls,
//! vegetation is volumetric blobs, trunks and poles are cylinders, cars are
//! box shells and persons/riders are small upright clusters. Each class gets
//! `round(frequency * budget)` points spread over its instances, so the
//! long-tail structure is fully controlled by the scene description.

use std::f64::consts::TAU;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::{LabeledCloud, Point3};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Primitive {
    Ground,
    Building,
    Vegetation,
    Car,
    Trunk,
    Pole,
    Person,
    Rider,
}

impl Primitive {
    pub fn name(self) -> &'static str {
        match self {
            Primitive::Ground => "ground",
            Primitive::Building => "building",
            Primitive::Vegetation => "vegetation",
            Primitive::Car => "car",
            Primitive::Trunk => "trunk",
            Primitive::Pole => "pole",
            Primitive::Person => "person",
            Primitive::Rider => "rider",
        }
    }

    fn default_instances(self) -> usize {
        match self {
            Primitive::Ground => 1,
            Primitive::Building => 4,
            Primitive::Vegetation => 6,
            Primitive::Car => 5,
            Primitive::Trunk => 6,
            Primitive::Pole => 6,
            Primitive::Person => 4,
            Primitive::Rider => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassSpec {
    pub primitive: Primitive,
    pub frequency: f64,
}

/// Geometric layout knobs; two layouts with different values form a domain pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneLayout {
    /// Radius of the ground disk (m).
    pub extent: f64,
    /// Ground height relative to the sensor (m).
    pub ground_z: f64,
    /// Multiplier on object dimensions.
    pub size_scale: f64,
    /// Multiplier on the number of instances per class.
    pub instance_scale: f64,
    /// Standard deviation of isotropic range noise (m).
    pub sensor_noise: f64,
    /// Standard deviation of ground height noise (m).
    pub ground_roughness: f64,
}

impl Default for SceneLayout {
    fn default() -> Self {
        Self {
            extent: 40.0,
            ground_z: -1.73,
            size_scale: 1.0,
            instance_scale: 1.0,
            sensor_noise: 0.0,
            ground_roughness: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub classes: Vec<ClassSpec>,
    pub layout: SceneLayout,
    pub point_budget: usize,
    pub seed: u64,
}

/// The eight-class long-tail taxonomy used throughout the toolkit.
pub const DEFAULT_CLASSES: [(Primitive, f64); 8] = [
    (Primitive::Ground, 0.45),
    (Primitive::Building, 0.20),
    (Primitive::Vegetation, 0.17),
    (Primitive::Car, 0.08),
    (Primitive::Trunk, 0.04),
    (Primitive::Pole, 0.03),
    (Primitive::Person, 0.02),
    (Primitive::Rider, 0.01),
];

impl SceneSpec {
    pub fn new(classes: Vec<ClassSpec>, layout: SceneLayout, point_budget: usize, seed: u64) -> Self {
        Self {
            classes,
            layout,
            point_budget,
            seed,
        }
    }

    pub fn default_classes() -> Vec<ClassSpec> {
        DEFAULT_CLASSES
            .iter()
            .map(|&(primitive, frequency)| ClassSpec {
                primitive,
                frequency,
            })
            .collect()
    }

    /// Clean synthetic source domain.
    pub fn source(point_budget: usize, seed: u64) -> Self {
        Self::new(Self::default_classes(), SceneLayout::default(), point_budget, seed)
    }

    /// A shifted target domain: larger objects, noisier sensor, rougher ground
    /// and a different class mix.
    pub fn target(point_budget: usize, seed: u64) -> Self {
        let freqs = [0.42, 0.17, 0.22, 0.09, 0.04, 0.03, 0.02, 0.01];
        let classes = Self::default_classes()
            .into_iter()
            .zip(freqs)
            .map(|(c, f)| ClassSpec {
                frequency: f,
                ..c
            })
            .collect();
        let layout = SceneLayout {
            size_scale: 1.15,
            sensor_noise: 0.02,
            ground_roughness: 0.05,
            extent: 45.0,
            ..SceneLayout::default()
        };
        Self::new(classes, layout, point_budget, seed)
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::arg("scene spec has no classes"));
        }
        if self.classes.iter().any(|c| !(c.frequency >= 0.0)) {
            return Err(Error::arg("class frequencies must be non-negative"));
        }
        let sum: f64 = self.classes.iter().map(|c| c.frequency).sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::arg(format!("class frequencies sum to {sum}, not 1")));
        }
        if self.point_budget == 0 {
            return Err(Error::arg("point budget must be positive"));
        }
        let l = &self.layout;
        if !(l.extent > 5.0 && l.size_scale > 0.0 && l.instance_scale > 0.0) {
            return Err(Error::arg("invalid scene layout"));
        }
        if !(l.sensor_noise >= 0.0 && l.ground_roughness >= 0.0) {
            return Err(Error::arg("noise levels must be non-negative"));
        }
        Ok(())
    }

    /// Target point count per class.
    pub fn class_budgets(&self) -> Vec<usize> {
        self.classes
            .iter()
            .map(|c| (c.frequency * self.point_budget as f64).round() as usize)
            .collect()
    }
}

pub fn synth_scene(spec: &SceneSpec) -> Result<LabeledCloud> {
    spec.validate()?;
    let mut r = rng::substream(spec.seed, "synth-scene");
    let layout = &spec.layout;
    let mut points = Vec::with_capacity(spec.point_budget);
    let mut labels = Vec::with_capacity(spec.point_budget);
    let mut occupied: Vec<(f64, f64, f64)> = Vec::new();

    for (class, (cs, budget)) in spec.classes.iter().zip(spec.class_budgets()).enumerate() {
        if budget == 0 {
            continue;
        }
        let instances = ((cs.primitive.default_instances() as f64 * layout.instance_scale).round()
            as usize)
            .clamp(1, budget);
        for inst in 0..instances {
            let n = budget / instances + usize::from(inst < budget % instances);
            let pts = sample_instance(cs.primitive, n, layout, &mut occupied, &mut r);
            labels.extend(std::iter::repeat_n(class as u32, pts.len()));
            points.extend(pts);
        }
    }

    if layout.sensor_noise > 0.0 {
        let noise = Normal::new(0.0, layout.sensor_noise).unwrap();
        for p in points.iter_mut() {
            for c in p.iter_mut() {
                *c += noise.sample(&mut r);
            }
        }
    }
    LabeledCloud::new(points, labels)
}

/// Draws an object footprint centre in the annulus `[r_min, r_max]` that
/// keeps `radius` clearance from already placed objects when possible.
fn place(
    r: &mut Rng,
    occupied: &mut Vec<(f64, f64, f64)>,
    r_min: f64,
    r_max: f64,
    radius: f64,
) -> (f64, f64) {
    let mut best = (0.0, 0.0);
    for attempt in 0..64 {
        let rho = r.random_range(r_min..r_max);
        let phi = r.random_range(0.0..TAU);
        let c = (rho * phi.cos(), rho * phi.sin());
        let clear = occupied
            .iter()
            .all(|&(x, y, rad)| ((x - c.0).powi(2) + (y - c.1).powi(2)).sqrt() > rad + radius);
        best = c;
        if clear || attempt == 63 {
            break;
        }
    }
    occupied.push((best.0, best.1, radius));
    best
}

fn sample_instance(
    kind: Primitive,
    n: usize,
    layout: &SceneLayout,
    occupied: &mut Vec<(f64, f64, f64)>,
    r: &mut Rng,
) -> Vec<Point3> {
    let s = layout.size_scale;
    let gz = layout.ground_z;
    let ext = layout.extent;
    match kind {
        Primitive::Ground => {
            let rough = Normal::new(0.0, layout.ground_roughness.max(1e-12)).unwrap();
            let (lo, hi) = (2.0f64.ln(), ext.ln());
            (0..n)
                .map(|_| {
                    // log-uniform range mimics the falloff of a spinning sensor
                    let rho = r.random_range(lo..hi).exp();
                    let phi = r.random_range(0.0..TAU);
                    [rho * phi.cos(), rho * phi.sin(), gz + rough.sample(r)]
                })
                .collect()
        }
        Primitive::Building => {
            let w = r.random_range(6.0..14.0) * s;
            let d = r.random_range(6.0..14.0) * s;
            let h = r.random_range(5.0..12.0) * s;
            let c = place(r, occupied, 0.35 * ext, 0.9 * ext, 0.5 * (w * w + d * d).sqrt());
            let yaw = r.random_range(0.0..TAU);
            box_surface(r, n, c, gz, [w, d, h], yaw, false)
        }
        Primitive::Car => {
            let dims = [4.2 * s, 1.8 * s, 1.5 * s];
            let c = place(r, occupied, 5.0, 0.7 * ext, 2.5 * s);
            let yaw = r.random_range(0.0..TAU);
            box_surface(r, n, c, gz + 0.25 * s, [dims[0], dims[1], dims[2] - 0.25 * s], yaw, true)
        }
        Primitive::Vegetation => {
            let rad = r.random_range(1.2..2.6) * s;
            let c = place(r, occupied, 6.0, 0.85 * ext, rad);
            let zc = gz + r.random_range(1.8..3.2) * s;
            let flat = r.random_range(0.6..0.9);
            (0..n)
                .map(|_| loop {
                    let u = [
                        r.random_range(-1.0..1.0f64),
                        r.random_range(-1.0..1.0f64),
                        r.random_range(-1.0..1.0f64),
                    ];
                    if u[0] * u[0] + u[1] * u[1] + u[2] * u[2] <= 1.0 {
                        break [c.0 + rad * u[0], c.1 + rad * u[1], zc + rad * flat * u[2]];
                    }
                })
                .collect()
        }
        Primitive::Trunk => {
            let rad = r.random_range(0.15..0.3) * s;
            let h = r.random_range(2.0..3.2) * s;
            let c = place(r, occupied, 5.0, 0.8 * ext, 0.6);
            cylinder_surface(r, n, c, gz, rad, h)
        }
        Primitive::Pole => {
            let rad = r.random_range(0.05..0.1) * s;
            let h = r.random_range(4.0..7.0) * s;
            let c = place(r, occupied, 4.0, 0.8 * ext, 0.4);
            cylinder_surface(r, n, c, gz, rad, h)
        }
        Primitive::Person => {
            let c = place(r, occupied, 4.0, 0.6 * ext, 0.5);
            let h = r.random_range(1.6..1.9) * s;
            upright_cluster(r, n, c, gz, 0.22 * s, h)
        }
        Primitive::Rider => {
            let c = place(r, occupied, 4.0, 0.6 * ext, 1.0);
            let yaw = r.random_range(0.0..TAU);
            let bike = n * 2 / 5;
            let mut pts = box_surface(r, bike, c, gz + 0.3 * s, [1.7 * s, 0.15 * s, 0.7 * s], yaw, false);
            pts.extend(upright_cluster(r, n - bike, c, gz + 0.7 * s, 0.25 * s, 1.0 * s));
            pts
        }
    }
}

/// Points on the walls (and optionally roof) of a yawed box standing at `base_z`.
fn box_surface(
    r: &mut Rng,
    n: usize,
    c: (f64, f64),
    base_z: f64,
    dims: [f64; 3],
    yaw: f64,
    roof: bool,
) -> Vec<Point3> {
    let [w, d, h] = dims;
    let (cy, sy) = (yaw.cos(), yaw.sin());
    let walls = 2.0 * (w + d) * h;
    let top = if roof { w * d } else { 0.0 };
    (0..n)
        .map(|_| {
            let pick = r.random_range(0.0..walls + top);
            let (lx, ly, lz) = if pick < walls {
                let t = r.random_range(0.0..2.0 * (w + d));
                let z = r.random_range(0.0..h);
                let (x, y) = if t < w {
                    (t - w / 2.0, -d / 2.0)
                } else if t < w + d {
                    (w / 2.0, t - w - d / 2.0)
                } else if t < 2.0 * w + d {
                    (t - w - d - w / 2.0, d / 2.0)
                } else {
                    (-w / 2.0, t - 2.0 * w - d - d / 2.0)
                };
                (x, y, z)
            } else {
                (
                    r.random_range(-w / 2.0..w / 2.0),
                    r.random_range(-d / 2.0..d / 2.0),
                    h,
                )
            };
            [c.0 + cy * lx - sy * ly, c.1 + sy * lx + cy * ly, base_z + lz]
        })
        .collect()
}

fn cylinder_surface(r: &mut Rng, n: usize, c: (f64, f64), base_z: f64, rad: f64, h: f64) -> Vec<Point3> {
    (0..n)
        .map(|_| {
            let phi = r.random_range(0.0..TAU);
            [
                c.0 + rad * phi.cos(),
                c.1 + rad * phi.sin(),
                base_z + r.random_range(0.0..h),
            ]
        })
        .collect()
}

/// Tapered upright body: a cylinder whose radius shrinks toward the head.
fn upright_cluster(r: &mut Rng, n: usize, c: (f64, f64), base_z: f64, rad: f64, h: f64) -> Vec<Point3> {
    (0..n)
        .map(|_| {
            let t: f64 = r.random_range(0.0..1.0);
            let phi = r.random_range(0.0..TAU);
            let local = if t > 0.85 { 0.5 * rad } else { rad * (0.7 + 0.3 * (1.0 - t)) };
            [
                c.0 + local * phi.cos(),
                c.1 + local * phi.sin(),
                base_z + t * h,
            ]
        })
        .collect()
}
