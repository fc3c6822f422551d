//! Experiment configuration: presets, `key = value` files and flag
//! overrides, resolved into one [`ExperimentConfig`].

use std::collections::BTreeSet;
use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::augmentor::{AugmentorKind, OpSet};
use crate::bilevel::BilevelConfig;
use crate::dataset::{DataSource, PoseShift, SyntheticConfig};
use crate::error::{Error, Result};
use crate::optim::OptimKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Preset {
    Standard,
    NonfixedPose,
    PoseMismatch,
    Transfer,
    BaselineSweep,
    Ablation,
}

impl Preset {
    pub const ALL: [Preset; 6] = [
        Preset::Standard,
        Preset::NonfixedPose,
        Preset::PoseMismatch,
        Preset::Transfer,
        Preset::BaselineSweep,
        Preset::Ablation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Standard => "standard",
            Preset::NonfixedPose => "nonfixed_pose",
            Preset::PoseMismatch => "pose_mismatch",
            Preset::Transfer => "transfer",
            Preset::BaselineSweep => "baseline_sweep",
            Preset::Ablation => "ablation",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().replace('-', "_");
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown preset `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "32",
            Precision::F64 => "64",
        })
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "32" | "f32" => Ok(Precision::F32),
            "64" | "f64" => Ok(Precision::F64),
            other => Err(Error::Usage(format!("precision must be 32 or 64, got `{other}`"))),
        }
    }
}

/// Which pose protocol the data follows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoseMode {
    Aligned,
    Mismatch,
    Nonfixed,
}

impl fmt::Display for PoseMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoseMode::Aligned => "aligned",
            PoseMode::Mismatch => "mismatch",
            PoseMode::Nonfixed => "nonfixed",
        })
    }
}

impl FromStr for PoseMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "aligned" | "none" => Ok(PoseMode::Aligned),
            "mismatch" => Ok(PoseMode::Mismatch),
            "nonfixed" => Ok(PoseMode::Nonfixed),
            other => Err(Error::Usage(format!("unknown pose mode `{other}`"))),
        }
    }
}

/// Everything a run depends on. Written verbatim to `config_resolved.txt`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub preset: Preset,
    /// `None` trains without augmentation.
    pub augmentor: Option<AugmentorKind>,
    pub ops: OpSet,
    pub bilevel: BilevelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub pose: PoseMode,
    pub theta_star: f64,
    pub pose_mean: f64,
    pub pose_sd: f64,
    pub subset_fraction: f64,
    pub data: DataSource,
    pub classes: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    pub n_points: usize,
    pub noise: f64,
    /// Share of each class held out as the test set for file data.
    pub test_fraction: f64,
    /// `None` keeps the augmentor's default.
    pub op_dropout: Option<f64>,
    pub gamma_feat: f64,
    /// Θ histograms are written every this many epochs and after the last.
    pub hist_every: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub precision: Precision,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let synth = SyntheticConfig::default();
        ExperimentConfig {
            preset: Preset::Standard,
            augmentor: Some(AugmentorKind::Neural),
            ops: "S,T,R".parse().expect("valid ops"),
            bilevel: BilevelConfig::default(),
            epochs: 100,
            batch_size: 24,
            pose: PoseMode::Aligned,
            theta_star: 0.0,
            pose_mean: 1.0,
            pose_sd: 0.2,
            subset_fraction: 1.0,
            data: DataSource::Synthetic,
            classes: synth.classes,
            per_class: synth.per_class,
            test_per_class: synth.test_per_class,
            n_points: synth.n_points,
            noise: synth.noise,
            test_fraction: 0.2,
            op_dropout: None,
            gamma_feat: 1.0,
            hist_every: 5,
            seed: 0,
            out: PathBuf::from("runs/out"),
            precision: Precision::F32,
        }
    }
}

/// Every accepted key, in the order `config_resolved.txt` lists them.
pub const KEYS: &[&str] = &[
    "preset",
    "augmentor",
    "ops",
    "lr",
    "alpha",
    "lambda",
    "lr_halving_period",
    "eps_scale",
    "clip",
    "outer",
    "inner",
    "epochs",
    "batch_size",
    "pose",
    "theta_star",
    "pose_mean",
    "pose_sd",
    "subset_fraction",
    "data",
    "classes",
    "per_class",
    "test_per_class",
    "n_points",
    "noise",
    "test_fraction",
    "op_dropout",
    "gamma_feat",
    "hist_every",
    "seed",
    "out",
    "precision",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Usage(format!("bad value `{value}` for `{key}`")))
}

fn parse_opt_f64(key: &str, value: &str) -> Result<Option<f64>> {
    match value.trim() {
        "none" | "default" | "" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

/// `--batch-size` and `batch_size` name the same key.
pub fn canonical_key(key: &str) -> String {
    key.trim().trim_start_matches("--").replace('-', "_")
}

impl ExperimentConfig {
    /// Defaults of `preset` before any overrides.
    pub fn for_preset(preset: Preset) -> Self {
        let mut c = ExperimentConfig {
            preset,
            ..Self::default()
        };
        match preset {
            Preset::Standard | Preset::BaselineSweep | Preset::Ablation => {}
            Preset::NonfixedPose => c.pose = PoseMode::Nonfixed,
            Preset::PoseMismatch => {
                c.pose = PoseMode::Mismatch;
                c.theta_star = 0.7;
                c.ops = "R".parse().expect("valid ops");
                c.bilevel.lambda = 0.0;
                c.bilevel.clip = Some(10.0);
            }
            Preset::Transfer => c.subset_fraction = 0.1,
        }
        c
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = canonical_key(key);
        let v = value.trim();
        match key.as_str() {
            "preset" => self.preset = v.parse()?,
            "augmentor" => {
                self.augmentor = match v {
                    "none" => None,
                    other => Some(other.parse()?),
                }
            }
            "ops" => self.ops = v.parse()?,
            "lr" | "xi" => self.bilevel.xi = parse(&key, v)?,
            "alpha" => self.bilevel.alpha = parse(&key, v)?,
            "lambda" => self.bilevel.lambda = parse(&key, v)?,
            "lr_halving_period" => self.bilevel.lr_halving_period = parse(&key, v)?,
            "eps_scale" => self.bilevel.eps_scale = parse(&key, v)?,
            "clip" => self.bilevel.clip = parse_opt_f64(&key, v)?,
            "outer" => self.bilevel.outer = v.parse::<OptimKind>()?,
            "inner" => self.bilevel.inner = v.parse::<OptimKind>()?,
            "epochs" => self.epochs = parse(&key, v)?,
            "batch_size" => self.batch_size = parse(&key, v)?,
            "pose" => self.pose = v.parse()?,
            "theta_star" => self.theta_star = parse(&key, v)?,
            "pose_mean" => self.pose_mean = parse(&key, v)?,
            "pose_sd" => self.pose_sd = parse(&key, v)?,
            "subset_fraction" => self.subset_fraction = parse(&key, v)?,
            "data" => self.data = v.parse()?,
            "classes" => self.classes = parse(&key, v)?,
            "per_class" => self.per_class = parse(&key, v)?,
            "test_per_class" => self.test_per_class = parse(&key, v)?,
            "n_points" => self.n_points = parse(&key, v)?,
            "noise" => self.noise = parse(&key, v)?,
            "test_fraction" => self.test_fraction = parse(&key, v)?,
            "op_dropout" => self.op_dropout = parse_opt_f64(&key, v)?,
            "gamma_feat" => self.gamma_feat = parse(&key, v)?,
            "hist_every" => self.hist_every = parse(&key, v)?,
            "seed" => self.seed = parse(&key, v)?,
            "out" => self.out = PathBuf::from(v),
            "precision" => self.precision = v.parse()?,
            _ => return Err(Error::Usage(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let b = &self.bilevel;
        let opt = |x: Option<f64>| x.map_or_else(|| "none".to_string(), |v| v.to_string());
        Some(match canonical_key(key).as_str() {
            "preset" => self.preset.to_string(),
            "augmentor" => self.augmentor.as_ref().map_or_else(|| "none".into(), |k| k.to_string()),
            "ops" => self.ops.to_string(),
            "lr" | "xi" => b.xi.to_string(),
            "alpha" => b.alpha.to_string(),
            "lambda" => b.lambda.to_string(),
            "lr_halving_period" => b.lr_halving_period.to_string(),
            "eps_scale" => b.eps_scale.to_string(),
            "clip" => opt(b.clip),
            "outer" => b.outer.to_string(),
            "inner" => b.inner.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "pose" => self.pose.to_string(),
            "theta_star" => self.theta_star.to_string(),
            "pose_mean" => self.pose_mean.to_string(),
            "pose_sd" => self.pose_sd.to_string(),
            "subset_fraction" => self.subset_fraction.to_string(),
            "data" => self.data.to_string(),
            "classes" => self.classes.to_string(),
            "per_class" => self.per_class.to_string(),
            "test_per_class" => self.test_per_class.to_string(),
            "n_points" => self.n_points.to_string(),
            "noise" => self.noise.to_string(),
            "test_fraction" => self.test_fraction.to_string(),
            "op_dropout" => opt(self.op_dropout),
            "gamma_feat" => self.gamma_feat.to_string(),
            "hist_every" => self.hist_every.to_string(),
            "seed" => self.seed.to_string(),
            "out" => self.out.display().to_string(),
            "precision" => self.precision.to_string(),
            _ => return None,
        })
    }

    /// Starts from the defaults of the last `preset` among `overrides`,
    /// applies every override in order, then rejects combinations that make
    /// no sense. Flags should come after config-file entries.
    pub fn resolve(overrides: &[(String, String)]) -> Result<Self> {
        let keys: Vec<String> = overrides.iter().map(|(k, _)| canonical_key(k)).collect();
        let preset = match overrides.iter().zip(&keys).rev().find(|(_, k)| *k == "preset") {
            Some(((_, v), _)) => v.parse()?,
            None => Preset::Standard,
        };
        let mut c = Self::for_preset(preset);
        let explicit: BTreeSet<String> = keys.iter().cloned().collect();
        for (k, v) in overrides {
            c.set(k, v)?;
        }
        if !explicit.contains("ops") {
            match &c.augmentor {
                Some(AugmentorKind::Predefined(p)) => c.ops = p.ops(),
                None if c.preset != Preset::Ablation => c.ops = OpSet::EMPTY,
                _ => {}
            }
        }
        // an explicit angle implies the mismatch protocol unless a pose was named
        if explicit.contains("theta_star") && !explicit.contains("pose") && c.pose == PoseMode::Aligned && c.theta_star != 0.0 {
            c.pose = PoseMode::Mismatch;
        }
        c.check(&explicit)?;
        Ok(c)
    }

    fn check(&self, explicit: &BTreeSet<String>) -> Result<()> {
        let usage = |m: String| Err(Error::Usage(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return usage("epochs and batch size must be positive".into());
        }
        if !(self.subset_fraction > 0.0 && self.subset_fraction <= 1.0) {
            return usage(format!("subset fraction {} outside (0, 1]", self.subset_fraction));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return usage(format!("test fraction {} outside (0, 1)", self.test_fraction));
        }
        if !self.theta_star.is_finite() || !self.pose_mean.is_finite() || !(self.pose_sd >= 0.0) {
            return usage("pose parameters must be finite and the spread non-negative".into());
        }
        if self.theta_star != 0.0 && self.pose != PoseMode::Mismatch {
            return usage(format!("--theta-star needs the mismatch pose protocol (pose is {})", self.pose));
        }
        if matches!(self.op_dropout, Some(p) if !(0.0..=1.0).contains(&p)) {
            return usage("op dropout outside [0, 1]".into());
        }
        self.bilevel.validate().map_err(|e| Error::Usage(e.to_string()))?;
        if let DataSource::Synthetic = self.data {
            self.synthetic().validate().map_err(|e| Error::Usage(e.to_string()))?;
        } else if self.n_points == 0 {
            return usage("n_points must be positive".into());
        }
        match &self.augmentor {
            Some(AugmentorKind::Predefined(p)) if explicit.contains("ops") && self.ops != p.ops() => {
                return usage(format!("--ops {} disagrees with policy `{p}` (ops {})", self.ops, p.ops()));
            }
            Some(k) if k.is_learned() && self.ops.is_empty() => {
                return usage("a learned augmentor needs at least one op; use --augmentor none".into());
            }
            _ => {}
        }
        match self.preset {
            Preset::Ablation if explicit.contains("ops") => usage("the ablation preset chooses ops itself; drop --ops".into()),
            Preset::BaselineSweep if explicit.contains("augmentor") => {
                usage("the baseline sweep chooses augmentors itself; drop --augmentor".into())
            }
            Preset::Transfer if !matches!(&self.augmentor, Some(k) if k.is_learned()) => {
                usage("the transfer preset needs a learned augmentor".into())
            }
            Preset::Transfer if self.subset_fraction >= 1.0 => usage("the transfer preset needs --subset-fraction below 1".into()),
            Preset::NonfixedPose if self.pose != PoseMode::Nonfixed => usage("the nonfixed_pose preset needs pose = nonfixed".into()),
            Preset::PoseMismatch if self.pose != PoseMode::Mismatch => usage("the pose_mismatch preset needs pose = mismatch".into()),
            _ => Ok(()),
        }
    }

    pub fn synthetic(&self) -> SyntheticConfig {
        SyntheticConfig {
            classes: self.classes,
            per_class: self.per_class,
            test_per_class: self.test_per_class,
            n_points: self.n_points,
            noise: self.noise,
            seed: self.seed,
        }
    }

    pub fn pose_shift(&self) -> PoseShift {
        match self.pose {
            PoseMode::Aligned => PoseShift::None,
            PoseMode::Mismatch => PoseShift::Mismatch(self.theta_star),
            PoseMode::Nonfixed => PoseShift::NonFixed {
                mean: self.pose_mean,
                sd: self.pose_sd,
            },
        }
    }

    /// All keys as `key = value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in KEYS {
            let _ = writeln!(s, "{key} = {}", self.get(key).expect("listed key"));
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Reads a file written by [`Self::write`] (or by hand) and resolves it.
    pub fn read(path: &Path) -> Result<Self> {
        Self::resolve(&read_pairs(path)?)
    }
}

/// Parses `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_pairs(path: &Path, text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let t = raw.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let (k, v) = t.split_once('=').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: "expected `key = value`".into(),
        })?;
        let key = canonical_key(k);
        if !KEYS.contains(&key.as_str()) && key != "xi" {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("unknown key `{key}`"),
            });
        }
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

pub fn read_pairs(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path)?;
    parse_pairs(path, &text)
}
