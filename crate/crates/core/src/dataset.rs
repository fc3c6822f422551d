//! Synthetic labeled point clouds, XYZ text ingestion, epoch resplits and
//! the pose-shift and subset protocols.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use log::warn;
use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::seeds::{self, Purpose};
use crate::tensor::{Real, Tensor};
use crate::transform::PointCloud;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeFamily {
    Sphere,
    Box,
    /// Axis along x.
    Cylinder,
    /// Axis along z.
    Torus,
    /// Axis along x, apex at +x.
    Cone,
    Ellipsoid,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 6] = [
        ShapeFamily::Sphere,
        ShapeFamily::Box,
        ShapeFamily::Cylinder,
        ShapeFamily::Torus,
        ShapeFamily::Cone,
        ShapeFamily::Ellipsoid,
    ];

    /// Family of class `label`.
    pub fn of_label(label: usize) -> Option<Self> {
        Self::ALL.get(label).copied()
    }

    /// `n` area-uniform surface samples with a random mild deformation.
    pub fn sample(self, n: usize, rng: &mut impl Rng) -> Vec<[f64; 3]> {
        let mut ratio = || rng.gen_range(0.7..1.3);
        match self {
            ShapeFamily::Sphere => (0..n).map(|_| unit_sphere(rng)).collect(),
            ShapeFamily::Box => {
                let e = [ratio(), ratio(), ratio()];
                sample_box(e, n, rng)
            }
            ShapeFamily::Cylinder => {
                let (r, h) = (0.5 * ratio(), ratio());
                sample_cylinder(r, h, n, rng)
            }
            ShapeFamily::Torus => {
                let (big, small) = (ratio(), 0.35 * ratio());
                sample_torus(big, small, n, rng)
            }
            ShapeFamily::Cone => {
                let (r, h) = (0.6 * ratio(), ratio());
                sample_cone(r, h, n, rng)
            }
            ShapeFamily::Ellipsoid => {
                let axes = [ratio(), 0.6 * ratio(), 0.4 * ratio()];
                sample_ellipsoid(axes, n, rng)
            }
        }
    }
}

impl fmt::Display for ShapeFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShapeFamily::Sphere => "sphere",
            ShapeFamily::Box => "box",
            ShapeFamily::Cylinder => "cylinder",
            ShapeFamily::Torus => "torus",
            ShapeFamily::Cone => "cone",
            ShapeFamily::Ellipsoid => "ellipsoid",
        })
    }
}

fn unit_sphere(rng: &mut impl Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [StandardNormal.sample(rng), StandardNormal.sample(rng), StandardNormal.sample(rng)];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-12 {
            return v.map(|x| x / n);
        }
    }
}

fn sample_box(e: [f64; 3], n: usize, rng: &mut impl Rng) -> Vec<[f64; 3]> {
    // faces normal to x, y, z have areas e_y·e_z, e_x·e_z, e_x·e_y
    let areas = [e[1] * e[2], e[0] * e[2], e[0] * e[1]];
    let total: f64 = areas.iter().sum();
    (0..n)
        .map(|_| {
            let mut pick = rng.gen::<f64>() * total;
            let mut axis = 2;
            for (i, a) in areas.iter().enumerate() {
                if pick < *a {
                    axis = i;
                    break;
                }
                pick -= a;
            }
            let mut p = [0.0; 3];
            for (k, x) in p.iter_mut().enumerate() {
                *x = if k == axis {
                    if rng.gen::<bool>() {
                        e[k]
                    } else {
                        -e[k]
                    }
                } else {
                    rng.gen_range(-e[k]..e[k])
                };
            }
            p
        })
        .collect()
}

fn disk(r: f64, rng: &mut impl Rng) -> (f64, f64) {
    let rho = r * rng.gen::<f64>().sqrt();
    let a = rng.gen_range(0.0..2.0 * PI);
    (rho * a.cos(), rho * a.sin())
}

fn sample_cylinder(r: f64, h: f64, n: usize, rng: &mut impl Rng) -> Vec<[f64; 3]> {
    let side = 2.0 * PI * r * 2.0 * h;
    let caps = 2.0 * PI * r * r;
    (0..n)
        .map(|_| {
            if rng.gen::<f64>() * (side + caps) < side {
                let a = rng.gen_range(0.0..2.0 * PI);
                [rng.gen_range(-h..h), r * a.cos(), r * a.sin()]
            } else {
                let (y, z) = disk(r, rng);
                [if rng.gen::<bool>() { h } else { -h }, y, z]
            }
        })
        .collect()
}

fn sample_torus(big: f64, small: f64, n: usize, rng: &mut impl Rng) -> Vec<[f64; 3]> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let u = rng.gen_range(0.0..2.0 * PI);
        let v = rng.gen_range(0.0..2.0 * PI);
        // the area element is proportional to big + small·cos v
        if rng.gen::<f64>() * (big + small) <= big + small * v.cos() {
            let ring = big + small * v.cos();
            out.push([ring * u.cos(), ring * u.sin(), small * v.sin()]);
        }
    }
    out
}

fn sample_cone(r: f64, h: f64, n: usize, rng: &mut impl Rng) -> Vec<[f64; 3]> {
    let slant = (r * r + 4.0 * h * h).sqrt();
    let side = PI * r * slant;
    let base = PI * r * r;
    (0..n)
        .map(|_| {
            if rng.gen::<f64>() * (side + base) < side {
                // distance from the apex ∝ sqrt(U) keeps the lateral density uniform
                let t = rng.gen::<f64>().sqrt();
                let a = rng.gen_range(0.0..2.0 * PI);
                [h - 2.0 * h * t, r * t * a.cos(), r * t * a.sin()]
            } else {
                let (y, z) = disk(r, rng);
                [-h, y, z]
            }
        })
        .collect()
}

fn sample_ellipsoid(axes: [f64; 3], n: usize, rng: &mut impl Rng) -> Vec<[f64; 3]> {
    let [a, b, c] = axes;
    let g_max = (a * b).max(b * c).max(a * c);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let p = unit_sphere(rng);
        let g = ((b * c * p[0]).powi(2) + (a * c * p[1]).powi(2) + (a * b * p[2]).powi(2)).sqrt();
        if rng.gen::<f64>() * g_max <= g {
            out.push([a * p[0], b * p[1], c * p[2]]);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    pub n_points: usize,
    /// Standard deviation of the Gaussian surface noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            classes: 4,
            per_class: 100,
            test_per_class: 25,
            n_points: 128,
            noise: 0.01,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > ShapeFamily::ALL.len() {
            return Err(Error::Invalid(format!(
                "synthetic data supports 2..={} classes, got {}",
                ShapeFamily::ALL.len(),
                self.classes
            )));
        }
        if self.n_points < 16 {
            return Err(Error::Invalid(format!("need at least 16 points per cloud, got {}", self.n_points)));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::Invalid("surface noise must be non-negative".into()));
        }
        Ok(())
    }
}

/// One normalized cloud; depends only on (seed stream, index).
fn synth_cloud<T: Real>(family: ShapeFamily, label: usize, n: usize, noise: f64, mut rng: ChaCha8Rng) -> PointCloud<T> {
    let mut pts = family.sample(n, &mut rng);
    if noise > 0.0 {
        for p in pts.iter_mut() {
            for x in p.iter_mut() {
                let e: f64 = StandardNormal.sample(&mut rng);
                *x += noise * e;
            }
        }
    }
    PointCloud::from_rows(&pts, label).expect("n ≥ 1").normalized()
}

/// `per_class` clouds per class, class-major, generated on up to
/// `available_parallelism` threads. The result does not depend on the
/// thread count.
pub fn generate_pool<T: Real>(config: &SyntheticConfig, per_class: usize, purpose: Purpose) -> Result<Vec<PointCloud<T>>> {
    config.validate()?;
    let total = config.classes * per_class;
    let make = |i: usize| {
        let label = i / per_class;
        let family = ShapeFamily::of_label(label).expect("validated class count");
        synth_cloud(family, label, config.n_points, config.noise, seeds::rng(config.seed, purpose, i as u64))
    };
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(total.max(1));
    if workers <= 1 {
        return Ok((0..total).map(make).collect());
    }
    let chunk = total.div_ceil(workers);
    let parts: Vec<Vec<PointCloud<T>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let make = &make;
                s.spawn(move || (w * chunk..((w + 1) * chunk).min(total)).map(make).collect::<Vec<_>>())
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("generator thread")).collect()
    });
    Ok(parts.into_iter().flatten().collect())
}

/// Training pool and a held-out test set drawn from an independent stream.
pub fn generate<T: Real>(config: &SyntheticConfig) -> Result<(Vec<PointCloud<T>>, Vec<PointCloud<T>>)> {
    Ok((
        generate_pool(config, config.per_class, Purpose::TrainPool)?,
        generate_pool(config, config.test_per_class, Purpose::TestPool)?,
    ))
}

/// Indices of one epoch's partition of the pool.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    /// Shuffled; also the minibatch order of the epoch.
    pub train: Vec<usize>,
    /// Ascending.
    pub val: Vec<usize>,
}

/// Fresh 90/10 partition of `0..pool_len` keyed by `(seed, epoch)`. The
/// train part has `⌊0.9·M⌋` elements.
pub fn resplit(pool_len: usize, seed: u64, epoch: usize) -> Split {
    let mut idx: Vec<usize> = (0..pool_len).collect();
    let mut rng = seeds::rng(seed, Purpose::Resplit, epoch as u64);
    idx.shuffle(&mut rng);
    let n_train = pool_len * 9 / 10;
    let mut val = idx.split_off(n_train);
    val.sort_unstable();
    Split { train: idx, val }
}

impl Split {
    pub fn train_clouds<T: Real>(&self, pool: &[PointCloud<T>]) -> Vec<PointCloud<T>> {
        self.train.iter().map(|&i| pool[i].clone()).collect()
    }

    /// Validation clouds, rotated by `val_rotation` about y when given.
    pub fn val_clouds<T: Real>(&self, pool: &[PointCloud<T>], val_rotation: Option<f64>) -> Vec<PointCloud<T>> {
        self.val
            .iter()
            .map(|&i| match val_rotation {
                Some(a) => pool[i].rotated_y(a),
                None => pool[i].clone(),
            })
            .collect()
    }
}

/// How poses differ across splits.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PoseShift {
    None,
    /// Validation and test rotated by θ*, training untouched.
    Mismatch(f64),
    /// Every cloud of every split rotated by its own draw from N(mean, sd²).
    NonFixed { mean: f64, sd: f64 },
}

impl PoseShift {
    pub const NONFIXED_DEFAULT: PoseShift = PoseShift::NonFixed { mean: 1.0, sd: 0.2 };

    /// Rotation applied to validation clouds at split time.
    pub fn val_rotation(&self) -> Option<f64> {
        match *self {
            PoseShift::Mismatch(t) if t != 0.0 => Some(t),
            _ => None,
        }
    }
}

/// Rotates every cloud by `angle` about y.
pub fn rotate_all<T: Real>(clouds: &[PointCloud<T>], angle: f64) -> Vec<PointCloud<T>> {
    clouds.iter().map(|c| c.rotated_y(angle)).collect()
}

/// Applies `shift` to a (train pool, test) pair before training. Mismatch
/// rotates only the test set here; validation clouds are rotated when each
/// epoch's split is drawn ([`Split::val_clouds`]). `stream` separates the
/// per-cloud angle draws of different sets.
pub fn apply_pose_shift<T: Real>(clouds: &[PointCloud<T>], shift: PoseShift, is_train: bool, seed: u64, stream: u64) -> Vec<PointCloud<T>> {
    match shift {
        PoseShift::None => clouds.to_vec(),
        PoseShift::Mismatch(t) => {
            if is_train || t == 0.0 {
                clouds.to_vec()
            } else {
                rotate_all(clouds, t)
            }
        }
        PoseShift::NonFixed { mean, sd } => {
            let mut rng = seeds::rng(seed, Purpose::Pose, stream);
            clouds
                .iter()
                .map(|c| {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    c.rotated_y(mean + sd * n)
                })
                .collect()
        }
    }
}

/// Stratified random subset: `round(fraction · count)` clouds of each class
/// (at least one per nonempty class), in pool order.
pub fn subset<T: Real>(pool: &[PointCloud<T>], fraction: f64, seed: u64) -> Result<Vec<PointCloud<T>>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Invalid(format!("subset fraction {fraction} outside (0, 1]")));
    }
    if fraction == 1.0 {
        return Ok(pool.to_vec());
    }
    let classes = pool.iter().map(|c| c.label() + 1).max().unwrap_or(0);
    let mut rng = seeds::rng(seed, Purpose::Subset, 0);
    let mut keep = vec![false; pool.len()];
    for label in 0..classes {
        let members: Vec<usize> = (0..pool.len()).filter(|&i| pool[i].label() == label).collect();
        if members.is_empty() {
            continue;
        }
        let k = ((fraction * members.len() as f64).round() as usize).clamp(1, members.len());
        for j in index::sample(&mut rng, members.len(), k) {
            keep[members[j]] = true;
        }
    }
    Ok(pool.iter().zip(keep).filter(|(_, k)| *k).map(|(c, _)| c.clone()).collect())
}

/// Stratified holdout of `fraction` of each class; returns (rest, held out).
pub fn holdout<T: Real>(pool: &[PointCloud<T>], fraction: f64, seed: u64) -> Result<(Vec<PointCloud<T>>, Vec<PointCloud<T>>)> {
    let classes = pool.iter().map(|c| c.label() + 1).max().unwrap_or(0);
    let mut rng = seeds::rng(seed, Purpose::Holdout, 0);
    let mut held = vec![false; pool.len()];
    for label in 0..classes {
        let members: Vec<usize> = (0..pool.len()).filter(|&i| pool[i].label() == label).collect();
        let k = (fraction * members.len() as f64).round() as usize;
        for j in index::sample(&mut rng, members.len(), k.min(members.len())) {
            held[members[j]] = true;
        }
    }
    let (mut rest, mut out) = (Vec::new(), Vec::new());
    for (c, h) in pool.iter().zip(held) {
        if h {
            out.push(c.clone());
        } else {
            rest.push(c.clone());
        }
    }
    Ok((rest, out))
}

/// Where training data comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic,
    Xyz(std::path::PathBuf),
}

impl fmt::Display for DataSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataSource::Synthetic => f.write_str("synthetic"),
            DataSource::Xyz(p) => write!(f, "{}", p.display()),
        }
    }
}

impl FromStr for DataSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "" => Err(Error::Usage("empty data source".into())),
            "synthetic" => Ok(DataSource::Synthetic),
            path => Ok(DataSource::Xyz(path.into())),
        }
    }
}

struct RawCloud {
    label: usize,
    points: Vec<[f64; 3]>,
    line: usize,
}

fn parse_xyz(path: &Path, text: &str) -> Result<Vec<RawCloud>> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut clouds: Vec<(RawCloud, usize)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let t = raw.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = t.split_whitespace().collect();
        if fields[0] == "cloud" {
            if let Some((c, expected)) = clouds.last() {
                if c.points.len() != *expected {
                    return Err(err(line, format!("previous cloud declared {expected} points but has {}", c.points.len())));
                }
            }
            if fields.len() != 4 {
                return Err(err(line, "expected `cloud <id> <label> <num_points>`".into()));
            }
            let label = fields[2].parse().map_err(|_| err(line, format!("bad label `{}`", fields[2])))?;
            let n: usize = fields[3].parse().map_err(|_| err(line, format!("bad point count `{}`", fields[3])))?;
            if n == 0 {
                return Err(err(line, "cloud with zero points".into()));
            }
            clouds.push((
                RawCloud {
                    label,
                    points: Vec::with_capacity(n),
                    line,
                },
                n,
            ));
            continue;
        }
        let (cloud, expected) = clouds.last_mut().ok_or_else(|| err(line, "point before any `cloud` header".into()))?;
        if fields.len() != 3 {
            return Err(err(line, format!("expected `x y z`, got {} fields", fields.len())));
        }
        let mut p = [0.0f64; 3];
        for (x, f) in p.iter_mut().zip(&fields) {
            *x = f.parse().map_err(|_| err(line, format!("bad coordinate `{f}`")))?;
            if !x.is_finite() {
                return Err(err(line, format!("non-finite coordinate `{f}`")));
            }
        }
        if cloud.points.len() == *expected {
            return Err(err(line, format!("more than the declared {expected} points")));
        }
        cloud.points.push(p);
    }
    if let Some((c, expected)) = clouds.last() {
        if c.points.len() != *expected {
            return Err(err(c.line, format!("cloud declared {expected} points but has {}", c.points.len())));
        }
    }
    Ok(clouds.into_iter().map(|(c, _)| c).collect())
}

/// Reads the XYZ-label format, normalizes each cloud and brings it to
/// `n_points` points: kept as is when the count matches, subsampled without
/// replacement when larger, resampled with replacement when smaller.
/// Labels must be below `classes` when given.
pub fn load_xyz<T: Real>(path: &Path, n_points: usize, classes: Option<usize>, seed: u64) -> Result<Vec<PointCloud<T>>> {
    let text = fs::read_to_string(path)?;
    let raw = parse_xyz(path, &text)?;
    if raw.is_empty() {
        warn!("{}: no clouds found", path.display());
    }
    if n_points == 0 {
        return Err(Error::Invalid("n_points must be positive".into()));
    }
    let mut out = Vec::with_capacity(raw.len());
    for (i, c) in raw.into_iter().enumerate() {
        if let Some(k) = classes {
            if c.label >= k {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: c.line,
                    msg: format!("unknown label {} (expected < {k})", c.label),
                });
            }
        }
        let m = c.points.len();
        let mut rng = seeds::rng(seed, Purpose::Resample, i as u64);
        let rows: Vec<[f64; 3]> = if m == n_points {
            c.points
        } else if m > n_points {
            let mut pick = index::sample(&mut rng, m, n_points).into_vec();
            pick.sort_unstable();
            pick.into_iter().map(|j| c.points[j]).collect()
        } else {
            (0..n_points).map(|_| c.points[rng.gen_range(0..m)]).collect()
        };
        out.push(PointCloud::from_rows(&rows, c.label)?.normalized());
    }
    Ok(out)
}

/// Writes clouds in the XYZ-label format with shortest round-trip decimals.
pub fn save_xyz<T: Real>(path: &Path, clouds: &[PointCloud<T>]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "# cloud <id> <label> <num_points>, then one `x y z` line per point")?;
    for (id, c) in clouds.iter().enumerate() {
        writeln!(w, "cloud {id} {} {}", c.label(), c.len())?;
        for row in c.points().data().chunks_exact(3) {
            writeln!(w, "{} {} {}", row[0].f64(), row[1].f64(), row[2].f64())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Hash of labels and coordinate bits; a cheap fingerprint for tests.
pub fn checksum<T: Real>(clouds: &[PointCloud<T>]) -> u64 {
    use std::hash::{Hash, Hasher};
    let mut h = std::collections::hash_map::DefaultHasher::new();
    for c in clouds {
        c.label().hash(&mut h);
        for x in c.points().data() {
            x.f64().to_bits().hash(&mut h);
        }
    }
    h.finish()
}

/// Builds a tensor-backed cloud from rows; convenience for callers.
pub fn cloud_from_rows<T: Real>(rows: &[[f64; 3]], label: usize) -> Result<PointCloud<T>> {
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    PointCloud::new(Tensor::from_f64(&[rows.len(), 3], &flat)?, label)
}
