//! Synthetic labeled point clouds.
//!
//! Every family is sampled on a fixed low-discrepancy lattice over its surface
//! parameters, so point `i` of every instance sits at the same parametric
//! location. That index alignment is what makes pointwise class averages
//! meaningful.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffgraph::Tensor;
use crate::error::{contract, Error, Result};

/// Ordered list of 3-D points.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Self {
        Self { points }
    }

    /// Builds a cloud from a flat `x0 y0 z0 x1 ...` buffer.
    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if !flat.len().is_multiple_of(3) {
            return contract(format!("flat buffer of {} values is not n×3", flat.len()));
        }
        Ok(Self { points: flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect() })
    }

    pub fn origin(n: usize) -> Self {
        Self { points: vec![[0.0; 3]; n] }
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.points.iter().flatten().copied().collect()
    }

    /// `[n, 3]` tensor view of the coordinates.
    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(vec![self.len(), 3], self.flat())
    }

    pub fn is_finite(&self) -> bool {
        self.points.iter().flatten().all(|v| v.is_finite())
    }

    pub fn centroid(&self) -> [f64; 3] {
        let n = self.points.len().max(1) as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        c.map(|v| v / n)
    }

    pub fn max_norm(&self) -> f64 {
        self.points.iter().map(norm3).fold(0.0, f64::max)
    }

    /// Applies `p ↦ R p + t` to every point.
    pub fn transformed(&self, rotation: &[[f64; 3]; 3], translation: [f64; 3]) -> Self {
        Self {
            points: self
                .points
                .iter()
                .map(|p| {
                    let mut q = translation;
                    for (r, row) in rotation.iter().enumerate() {
                        q[r] += row[0] * p[0] + row[1] * p[1] + row[2] * p[2];
                    }
                    q
                })
                .collect(),
        }
    }

    /// Centers at the centroid and scales so the farthest point has norm 1.
    pub fn normalized(&self) -> Result<Self> {
        let distinct = self.points.iter().any(|p| p != &self.points[0]);
        if self.points.len() < 2 || !distinct {
            return contract("normalization needs at least two distinct points");
        }
        let c = self.centroid();
        let centered: Vec<[f64; 3]> = self.points.iter().map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]]).collect();
        let scale = centered.iter().map(norm3).fold(0.0, f64::max);
        Ok(Self { points: centered.iter().map(|p| p.map(|v| v / scale)).collect() })
    }
}

pub(crate) fn norm3(p: &[f64; 3]) -> f64 {
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
}

/// Free-function form of [`PointCloud::normalized`].
pub fn normalize_unit_sphere(cloud: &PointCloud) -> Result<PointCloud> {
    cloud.normalized()
}

/// The eight parametric shape families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeFamily {
    Sphere,
    Cube,
    Cylinder,
    Cone,
    Torus,
    Pyramid,
    Plane,
    Dumbbell,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 8] = [
        ShapeFamily::Sphere,
        ShapeFamily::Cube,
        ShapeFamily::Cylinder,
        ShapeFamily::Cone,
        ShapeFamily::Torus,
        ShapeFamily::Pyramid,
        ShapeFamily::Plane,
        ShapeFamily::Dumbbell,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeFamily::Sphere => "sphere",
            ShapeFamily::Cube => "cube",
            ShapeFamily::Cylinder => "cylinder",
            ShapeFamily::Cone => "cone",
            ShapeFamily::Torus => "torus",
            ShapeFamily::Pyramid => "pyramid",
            ShapeFamily::Plane => "plane",
            ShapeFamily::Dumbbell => "two-sphere-dumbbell",
        }
    }

    /// `n` points on the canonical (unjittered, unrotated) surface, in lattice order.
    pub fn surface_points(self, n: usize) -> Vec<[f64; 3]> {
        lattice(n).map(|(u, v)| self.surface_at(u, v)).collect()
    }

    fn surface_at(self, u: f64, v: f64) -> [f64; 3] {
        match self {
            ShapeFamily::Sphere => sphere_at(u, v, 1.0),
            ShapeFamily::Cube => {
                let (face, t) = split(u, &[1.0; 6]);
                let (a, b) = (2.0 * t - 1.0, 2.0 * v - 1.0);
                let axis = face / 2;
                let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
                let mut p = [0.0; 3];
                p[axis] = sign;
                p[(axis + 1) % 3] = a;
                p[(axis + 2) % 3] = b;
                p
            }
            ShapeFamily::Cylinder => {
                let (r, h) = (0.5, 1.0);
                let (part, t) = split(u, &[TAU * r * 2.0 * h, PI * r * r, PI * r * r]);
                let a = TAU * v;
                match part {
                    0 => [r * a.cos(), r * a.sin(), -h + 2.0 * h * t],
                    _ => {
                        let rr = r * t.sqrt();
                        let z = if part == 1 { h } else { -h };
                        [rr * a.cos(), rr * a.sin(), z]
                    }
                }
            }
            ShapeFamily::Cone => {
                let (r, h): (f64, f64) = (0.7, 1.5);
                let slant = r.hypot(h);
                let (part, t) = split(u, &[PI * r * slant, PI * r * r]);
                let a = TAU * v;
                let rr = r * t.sqrt();
                if part == 0 {
                    [rr * a.cos(), rr * a.sin(), h / 2.0 - h * rr / r]
                } else {
                    [rr * a.cos(), rr * a.sin(), -h / 2.0]
                }
            }
            ShapeFamily::Torus => {
                let (big, small) = (1.0, 0.35);
                let (a, b) = (TAU * u, TAU * v);
                let ring = big + small * b.cos();
                [ring * a.cos(), ring * a.sin(), small * b.sin()]
            }
            ShapeFamily::Pyramid => {
                let h = 1.2f64;
                let slant = h.hypot(1.0);
                let (face, t) = split(u, &[4.0, slant, slant, slant, slant]);
                let p = if face == 0 {
                    [2.0 * t - 1.0, 2.0 * v - 1.0, 0.0]
                } else {
                    const CORNERS: [[f64; 2]; 4] = [[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]];
                    let a = CORNERS[face - 1];
                    let b = CORNERS[face % 4];
                    // fold the unit square onto the triangle (A, B, apex)
                    let (s, w) = if t + v > 1.0 { (1.0 - t, 1.0 - v) } else { (t, v) };
                    [
                        a[0] + s * (b[0] - a[0]) - w * a[0],
                        a[1] + s * (b[1] - a[1]) - w * a[1],
                        w * h,
                    ]
                };
                [p[0], p[1], p[2] - h / 3.0]
            }
            ShapeFamily::Plane => [2.0 * u - 1.0, 0.7 * (2.0 * v - 1.0), 0.0],
            ShapeFamily::Dumbbell => {
                let (part, t) = split(u, &[1.0, 1.0]);
                let s = sphere_at(t, v, 0.45);
                let offset = if part == 0 { -0.7 } else { 0.7 };
                [s[0] + offset, s[1], s[2]]
            }
        }
    }
}

impl fmt::Display for ShapeFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two-sphere-dumbbell" | "dumbbell" => Ok(ShapeFamily::Dumbbell),
            _ => ShapeFamily::ALL
                .into_iter()
                .find(|f| f.name() == s)
                .ok_or_else(|| Error::Contract(format!("unknown shape family `{s}`"))),
        }
    }
}

fn sphere_at(u: f64, v: f64, radius: f64) -> [f64; 3] {
    let z = 1.0 - 2.0 * u;
    let r = (1.0 - z * z).max(0.0).sqrt();
    let a = TAU * v;
    [radius * r * a.cos(), radius * r * a.sin(), radius * z]
}

/// 2-D Fibonacci lattice on the unit square: `u` stratified, `v` golden-ratio.
fn lattice(n: usize) -> impl Iterator<Item = (f64, f64)> {
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    (0..n).map(move |i| ((i as f64 + 0.5) / n as f64, (i as f64 * phi).fract()))
}

/// Maps `u ∈ [0,1)` to a piece chosen in proportion to `weights` and the
/// local coordinate inside that piece.
fn split(u: f64, weights: &[f64]) -> (usize, f64) {
    let total: f64 = weights.iter().sum();
    let mut lo = 0.0;
    for (i, w) in weights.iter().enumerate() {
        let hi = lo + w / total;
        if u < hi || i == weights.len() - 1 {
            return (i, ((u - lo) / (w / total)).clamp(0.0, 1.0));
        }
        lo = hi;
    }
    unreachable!("weights must be nonempty")
}

/// Per-instance perturbations applied to a canonical surface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub family: ShapeFamily,
    /// Per-axis scale factor range, drawn independently per axis.
    pub scale_range: (f64, f64),
    /// Rotation angle is uniform in `[0, max_rotation]` about a uniform axis.
    pub max_rotation: f64,
    pub noise_sigma: f64,
}

impl ShapeSpec {
    pub fn new(family: ShapeFamily) -> Self {
        Self { family, scale_range: (0.9, 1.1), max_rotation: 0.25, noise_sigma: 0.005 }
    }

    /// Only the bare surface: no jitter, rotation or noise.
    pub fn exact(family: ShapeFamily) -> Self {
        Self { family, scale_range: (1.0, 1.0), max_rotation: 0.0, noise_sigma: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if !(lo > 0.5 && hi < 1.5 && lo <= hi) {
            return contract(format!("scale jitter range ({lo}, {hi}) must lie within (0.5, 1.5)"));
        }
        if !(0.0..0.05).contains(&self.noise_sigma) {
            return contract(format!("noise sigma {} must be in [0, 0.05)", self.noise_sigma));
        }
        if !(self.max_rotation >= 0.0 && self.max_rotation <= PI) {
            return contract("max rotation must be within [0, π]");
        }
        Ok(())
    }
}

/// Rotation matrix for `angle` radians about `axis` (Rodrigues).
pub fn axis_angle(axis: [f64; 3], angle: f64) -> [[f64; 3]; 3] {
    let n = norm3(&axis);
    let [x, y, z] = if n > 0.0 { axis.map(|v| v / n) } else { [0.0, 0.0, 1.0] };
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [c + x * x * t, x * y * t - z * s, x * z * t + y * s],
        [y * x * t + z * s, c + y * y * t, y * z * t - x * s],
        [z * x * t - y * s, z * y * t + x * s, c + z * z * t],
    ]
}

/// Samples one instance: canonical surface → per-axis scale → noise →
/// rotation → normalization.
pub fn sample_shape(spec: &ShapeSpec, n: usize, seed: u64) -> Result<PointCloud> {
    if n < 8 {
        return contract(format!("shape sampling needs at least 8 points, got {n}"));
    }
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = spec.scale_range;
    let scale: [f64; 3] = std::array::from_fn(|_| if hi > lo { rng.random_range(lo..hi) } else { lo });
    let mut points = spec.family.surface_points(n);
    if spec.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sigma).expect("sigma validated");
        for p in points.iter_mut() {
            for k in 0..3 {
                p[k] = p[k] * scale[k] + noise.sample(&mut rng);
            }
        }
    } else {
        for p in points.iter_mut() {
            for k in 0..3 {
                p[k] *= scale[k];
            }
        }
    }
    let axis: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
    let angle = if spec.max_rotation > 0.0 { rng.random_range(0.0..spec.max_rotation) } else { 0.0 };
    PointCloud::new(points).transformed(&axis_angle(axis, angle), [0.0; 3]).normalized()
}

/// i.i.d. `U(-r, r)` coordinates; not normalized.
pub fn random_cloud_uniform(r: f64, n: usize, seed: u64) -> Result<PointCloud> {
    if !(r >= 0.0) {
        return contract(format!("uniform half-extent must be ≥ 0, got {r}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = (0..n)
        .map(|_| std::array::from_fn(|_| if r > 0.0 { rng.random_range(-r..r) } else { 0.0 }))
        .collect();
    Ok(PointCloud::new(points))
}

/// i.i.d. `N(0, sigma²)` coordinates; not normalized.
pub fn random_cloud_gaussian(sigma: f64, n: usize, seed: u64) -> Result<PointCloud> {
    if !(sigma >= 0.0) {
        return contract(format!("gaussian sigma must be ≥ 0, got {sigma}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = (0..n)
        .map(|_| {
            std::array::from_fn(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                sigma * z
            })
        })
        .collect();
    Ok(PointCloud::new(points))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledCloud {
    pub cloud: PointCloud,
    pub label: usize,
    pub instance_id: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub families: Vec<ShapeFamily>,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub points: usize,
    pub scale_range: (f64, f64),
    pub max_rotation: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        let spec = ShapeSpec::new(ShapeFamily::Sphere);
        Self {
            families: ShapeFamily::ALL.to_vec(),
            train_per_class: 100,
            test_per_class: 20,
            points: 256,
            scale_range: spec.scale_range,
            max_rotation: spec.max_rotation,
            noise_sigma: spec.noise_sigma,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn spec(&self, family: ShapeFamily) -> ShapeSpec {
        ShapeSpec {
            family,
            scale_range: self.scale_range,
            max_rotation: self.max_rotation,
            noise_sigma: self.noise_sigma,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<LabeledCloud>,
    pub test: Vec<LabeledCloud>,
    pub class_names: Vec<String>,
    pub seed: u64,
}

/// Which instances feed a class average.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AverageSource {
    /// Test instances of the requested class.
    #[default]
    ClassTest,
    /// Every test instance regardless of label.
    GlobalTest,
}

impl DatasetSplit {
    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn points_per_cloud(&self) -> Option<usize> {
        self.train.iter().chain(&self.test).map(|c| c.cloud.len()).next()
    }

    pub fn test_of_class(&self, label: usize) -> impl Iterator<Item = &LabeledCloud> {
        self.test.iter().filter(move |c| c.label == label)
    }

    pub fn train_of_class(&self, label: usize) -> impl Iterator<Item = &LabeledCloud> {
        self.train.iter().filter(move |c| c.label == label)
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|n| n == name)
    }

    /// Checks the split invariants: labels in range, ids disjoint, every class in both splits.
    pub fn validate(&self) -> Result<()> {
        let k = self.class_count();
        let mut ids = std::collections::HashSet::new();
        for c in self.train.iter().chain(&self.test) {
            if c.label >= k {
                return contract(format!("label {} out of range for {k} classes", c.label));
            }
            if !ids.insert(c.instance_id) {
                return contract(format!("duplicate instance id {}", c.instance_id));
            }
        }
        for label in 0..k {
            if self.train_of_class(label).next().is_none() || self.test_of_class(label).next().is_none() {
                return contract(format!("class {label} missing from a split"));
            }
        }
        Ok(())
    }
}

/// Mixes a base seed with a stream index (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn dataset_generate(config: &DatasetConfig) -> Result<DatasetSplit> {
    if config.families.is_empty() {
        return contract("dataset needs at least one class");
    }
    if config.train_per_class < 2 || config.test_per_class < 2 {
        return contract("per-class counts must be at least 2");
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut next_id = 0u64;
    for (label, &family) in config.families.iter().enumerate() {
        let spec = config.spec(family);
        for (is_test, count) in [(false, config.train_per_class), (true, config.test_per_class)] {
            for _ in 0..count {
                let cloud = sample_shape(&spec, config.points, derive_seed(config.seed, next_id))?;
                let item = LabeledCloud { cloud, label, instance_id: next_id };
                next_id += 1;
                if is_test { test.push(item) } else { train.push(item) }
            }
        }
    }
    Ok(DatasetSplit {
        train,
        test,
        class_names: config.families.iter().map(|f| f.name().to_string()).collect(),
        seed: config.seed,
    })
}

/// Index-aligned mean of clouds, renormalized.
pub fn average_cloud<'a>(clouds: impl IntoIterator<Item = &'a PointCloud>) -> Result<PointCloud> {
    let mut acc: Vec<[f64; 3]> = Vec::new();
    let mut count = 0usize;
    for c in clouds {
        if count == 0 {
            acc = vec![[0.0; 3]; c.len()];
        } else if c.len() != acc.len() {
            return contract("averaged clouds must share a point count");
        }
        for (a, p) in acc.iter_mut().zip(c.points()) {
            for k in 0..3 {
                a[k] += p[k];
            }
        }
        count += 1;
    }
    if count == 0 {
        return contract("cannot average an empty set of clouds");
    }
    PointCloud::new(acc.into_iter().map(|p| p.map(|v| v / count as f64)).collect()).normalized()
}

/// Pointwise average of the test instances of `label` (or of all test
/// instances for [`AverageSource::GlobalTest`]), renormalized.
pub fn class_average_cloud(split: &DatasetSplit, label: usize, source: AverageSource) -> Result<PointCloud> {
    if label >= split.class_count() {
        return contract(format!("class {label} not present"));
    }
    match source {
        AverageSource::ClassTest => {
            let members: Vec<&PointCloud> = split.test_of_class(label).map(|c| &c.cloud).collect();
            if members.is_empty() {
                return contract(format!("class {label} has no test instances to average"));
            }
            average_cloud(members)
        }
        AverageSource::GlobalTest => average_cloud(split.test.iter().map(|c| &c.cloud)),
    }
}
