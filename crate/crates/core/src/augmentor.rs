//! Stochastic producers of augmentation parameters Θ.
//!
//! Learned augmentors hold no weights themselves: [`Augmentor::init_params`]
//! creates a [`ParamSet`] Φ, and every tape-level method takes Φ as the
//! handles returned by [`ParamSet::register`]. Randomness is drawn up front
//! into an [`AugNoise`] so the same realization can be replayed under
//! different parameters.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::params::{ParamFile, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};
use crate::transform::{self, slots, AugParams, JitterDraw, PointCloud, DEFAULT_UPSILON, THETA_DIM};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Op {
    S,
    T,
    R,
    J,
}

impl Op {
    pub const ALL: [Op; 4] = [Op::S, Op::T, Op::R, Op::J];

    pub fn slots(self) -> std::ops::Range<usize> {
        match self {
            Op::J => slots::JITTER..slots::JITTER + 1,
            Op::R => slots::ROTATION..slots::ROTATION + 1,
            Op::S => slots::SCALE,
            Op::T => slots::TRANSLATION,
        }
    }

    fn bit(self) -> u8 {
        1 << self as u8
    }
}

/// A subset of {S, T, R, J}.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct OpSet(u8);

impl OpSet {
    pub const EMPTY: OpSet = OpSet(0);
    pub const ALL: OpSet = OpSet(0b1111);

    pub fn of(ops: &[Op]) -> Self {
        OpSet(ops.iter().fold(0, |m, o| m | o.bit()))
    }

    pub fn contains(self, op: Op) -> bool {
        self.0 & op.bit() != 0
    }

    pub fn insert(&mut self, op: Op) {
        self.0 |= op.bit();
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = Op> {
        Op::ALL.into_iter().filter(move |&o| self.contains(o))
    }

    pub fn union(self, other: OpSet) -> OpSet {
        OpSet(self.0 | other.0)
    }

    /// Per-component flags of Θ covered by the set.
    pub fn mask(self) -> [bool; THETA_DIM] {
        let mut m = [false; THETA_DIM];
        for op in self.iter() {
            for i in op.slots() {
                m[i] = true;
            }
        }
        m
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn from_bits(bits: u8) -> Result<Self> {
        if bits > 0b1111 {
            return Err(Error::Format(format!("invalid op mask {bits}")));
        }
        Ok(OpSet(bits))
    }
}

impl fmt::Display for OpSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_empty() {
            return f.write_str("none");
        }
        let names: Vec<String> = self.iter().map(|o| format!("{o:?}")).collect();
        f.write_str(&names.join("+"))
    }
}

impl FromStr for OpSet {
    type Err = Error;

    /// Accepts `S,T,R`, `S+T+R`, `STR`, and `none`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() || s.eq_ignore_ascii_case("none") || s == "∅" {
            return Ok(OpSet::EMPTY);
        }
        let mut set = OpSet::EMPTY;
        for c in s.chars().filter(|c| !matches!(c, ',' | '+' | ' ')) {
            let op = match c.to_ascii_uppercase() {
                'S' => Op::S,
                'T' => Op::T,
                'R' => Op::R,
                'J' => Op::J,
                _ => return Err(Error::Usage(format!("unknown augmentation op `{c}` in `{s}`"))),
            };
            set.insert(op);
        }
        Ok(set)
    }
}

/// One fixed sampling rule of a predefined baseline.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PolicyRule {
    /// Each scale component ~ U(0.67, 1.5).
    Scale,
    /// Each translation component ~ U(-0.2, 0.2).
    Translate,
    /// θ_r ~ N(0, 0.06²) clipped to ±0.18.
    Rotate,
    /// θ_J ~ N(0, 0.01²) clipped to ±0.05.
    Jitter,
    /// θ_r ~ U(-δ, δ).
    RotUniform(f64),
}

impl PolicyRule {
    pub fn op(self) -> Op {
        match self {
            PolicyRule::Scale => Op::S,
            PolicyRule::Translate => Op::T,
            PolicyRule::Rotate | PolicyRule::RotUniform(_) => Op::R,
            PolicyRule::Jitter => Op::J,
        }
    }
}

/// A predefined, non-learnable baseline: one or more rules joined by `+`.
#[derive(Clone, Debug, PartialEq)]
pub struct Policy(pub Vec<PolicyRule>);

impl Policy {
    pub fn ops(&self) -> OpSet {
        OpSet::of(&self.0.iter().map(|r| r.op()).collect::<Vec<_>>())
    }

    pub fn sample(&self, rng: &mut impl Rng) -> AugParams {
        fn normal(rng: &mut impl Rng, sd: f64) -> f64 {
            let n: f64 = StandardNormal.sample(rng);
            sd * n
        }
        let mut th = AugParams::IDENTITY;
        for rule in &self.0 {
            match *rule {
                PolicyRule::Scale => {
                    for i in slots::SCALE {
                        th.0[i] = rng.gen_range(0.67..1.5);
                    }
                }
                PolicyRule::Translate => {
                    for i in slots::TRANSLATION {
                        th.0[i] = rng.gen_range(-0.2..=0.2);
                    }
                }
                PolicyRule::Rotate => {
                    th.0[slots::ROTATION] = normal(rng, 0.06).clamp(-0.18, 0.18);
                }
                PolicyRule::Jitter => {
                    th.0[slots::JITTER] = normal(rng, 0.01).clamp(-0.05, 0.05);
                }
                PolicyRule::RotUniform(d) => {
                    th.0[slots::ROTATION] = if d > 0.0 { rng.gen_range(-d..=d) } else { 0.0 };
                }
            }
        }
        th
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<String> = self
            .0
            .iter()
            .map(|r| match r {
                PolicyRule::Scale => "scale".to_string(),
                PolicyRule::Translate => "translate".to_string(),
                PolicyRule::Rotate => "rotate".to_string(),
                PolicyRule::Jitter => "jitter".to_string(),
                PolicyRule::RotUniform(d) => format!("rot={d}"),
            })
            .collect();
        f.write_str(&names.join("+"))
    }
}

impl FromStr for Policy {
    type Err = Error;

    /// Names: `scale`, `translate`, `rotate`, `jitter`, `rot=<δ>`, joined by `+`.
    fn from_str(s: &str) -> Result<Self> {
        let mut rules = Vec::new();
        for part in s.split('+').map(str::trim) {
            let rule = match part {
                "scale" | "scaling" => PolicyRule::Scale,
                "translate" | "translation" => PolicyRule::Translate,
                "rotate" | "rotation" => PolicyRule::Rotate,
                "jitter" | "jittering" => PolicyRule::Jitter,
                _ => match part.strip_prefix("rot=").map(str::parse::<f64>) {
                    Some(Ok(d)) if d.is_finite() && d >= 0.0 => PolicyRule::RotUniform(d),
                    _ => return Err(Error::UnknownPolicy(s.to_string())),
                },
            };
            rules.push(rule);
        }
        Ok(Policy(rules))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum AugmentorKind {
    Fixed,
    Uniform,
    Gaussian,
    Neural,
    Predefined(Policy),
}

impl AugmentorKind {
    pub fn is_learned(&self) -> bool {
        !matches!(self, AugmentorKind::Predefined(_))
    }
}

impl fmt::Display for AugmentorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AugmentorKind::Fixed => f.write_str("fixed"),
            AugmentorKind::Uniform => f.write_str("uniform"),
            AugmentorKind::Gaussian => f.write_str("gaussian"),
            AugmentorKind::Neural => f.write_str("neural"),
            AugmentorKind::Predefined(p) => write!(f, "predefined:{p}"),
        }
    }
}

impl FromStr for AugmentorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "fixed" => Ok(AugmentorKind::Fixed),
            "uniform" => Ok(AugmentorKind::Uniform),
            "gaussian" => Ok(AugmentorKind::Gaussian),
            "neural" => Ok(AugmentorKind::Neural),
            other => match other.strip_prefix("predefined:") {
                Some(p) => Ok(AugmentorKind::Predefined(p.parse()?)),
                None => Err(Error::Usage(format!("unknown augmentor `{other}`"))),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeuralConfig {
    pub d_z: usize,
    pub hidden: Vec<usize>,
    /// Multiplier on the Glorot-initialized output weights.
    pub out_scale: f64,
}

impl Default for NeuralConfig {
    fn default() -> Self {
        NeuralConfig {
            d_z: 16,
            hidden: vec![32, 32],
            out_scale: 1e-2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentorSpec {
    pub kind: AugmentorKind,
    pub enabled_ops: OpSet,
    pub op_dropout_prob: f64,
    /// Per-component `[lo, hi]` applied to sampled Θ; gradient 0 outside.
    pub clip: Option<([f64; THETA_DIM], [f64; THETA_DIM])>,
    pub prior: AugParams,
    pub upsilon: f64,
    pub neural: NeuralConfig,
    /// Initial interval width (uniform) or standard deviation (Gaussian).
    pub init_spread: f64,
}

impl AugmentorSpec {
    pub fn new(kind: AugmentorKind, enabled_ops: OpSet) -> Self {
        let op_dropout_prob = if kind.is_learned() { 0.5 } else { 0.0 };
        AugmentorSpec {
            kind,
            enabled_ops,
            op_dropout_prob,
            clip: None,
            prior: AugParams::IDENTITY,
            upsilon: DEFAULT_UPSILON,
            neural: NeuralConfig::default(),
            init_spread: 0.1,
        }
    }

    /// A baseline whose enabled ops follow from the policy.
    pub fn predefined(policy: Policy) -> Self {
        let ops = policy.ops();
        Self::new(AugmentorKind::Predefined(policy), ops)
    }

    pub fn with_dropout(mut self, p: f64) -> Self {
        self.op_dropout_prob = p;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.enabled_ops.is_empty() {
            return Err(Error::Invalid("augmentor needs at least one enabled op".into()));
        }
        if !(0.0..=1.0).contains(&self.op_dropout_prob) {
            return Err(Error::Invalid(format!("op dropout {} outside [0, 1]", self.op_dropout_prob)));
        }
        if let AugmentorKind::Predefined(p) = &self.kind {
            if p.0.is_empty() {
                return Err(Error::UnknownPolicy(String::new()));
            }
        }
        if self.kind == AugmentorKind::Neural && self.neural.d_z == 0 {
            return Err(Error::Invalid("neural augmentor needs d_z > 0".into()));
        }
        if let Some((lo, hi)) = &self.clip {
            if lo.iter().zip(hi).any(|(l, h)| l > h) {
                return Err(Error::Invalid("clip lower bound above upper bound".into()));
            }
        }
        if !(self.init_spread > 0.0) || !(self.upsilon >= 0.0) {
            return Err(Error::Invalid("spread and υ must be positive".into()));
        }
        Ok(())
    }
}

/// Pre-drawn randomness for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct AugNoise<T> {
    /// B×8 uniform or Gaussian base noise, B×d_z generator input, or empty.
    pub base: Tensor<T>,
    /// Whether each op survived dropout, per sample, indexed by `Op as usize`.
    pub keep: Vec<[bool; 4]>,
    pub jitter: Vec<JitterDraw<T>>,
    /// Concrete draws of a predefined policy.
    pub predefined: Vec<AugParams>,
}

impl<T: Real> AugNoise<T> {
    pub fn batch_size(&self) -> usize {
        self.keep.len()
    }
}

/// Θ for a batch, before and after op dropout.
#[derive(Clone, Copy, Debug)]
pub struct ThetaBatch {
    /// Disabled ops at identity, dropout not yet applied. This is what gets
    /// logged and regularized.
    pub raw: Var,
    /// What the transform consumes.
    pub applied: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Augmentor {
    spec: AugmentorSpec,
}

fn glorot<T: Real>(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, scale: f64) -> Tensor<T> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| T::of(scale * rng.gen_range(-a..a))).collect();
    Tensor::new(&[fan_in, fan_out], data).expect("fan_in×fan_out")
}

/// Inverse of softplus for positive `y`.
fn softplus_inv(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl Augmentor {
    pub fn new(spec: AugmentorSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Augmentor { spec })
    }

    pub fn spec(&self) -> &AugmentorSpec {
        &self.spec
    }

    pub fn kind(&self) -> &AugmentorKind {
        &self.spec.kind
    }

    /// Φ at initialization. Every kind starts centered on the prior.
    pub fn init_params<T: Real>(&self, rng: &mut ChaCha8Rng) -> ParamSet<T> {
        let prior = self.spec.prior;
        let mut p = ParamSet::new();
        match &self.spec.kind {
            AugmentorKind::Fixed => p.push("theta", prior.to_tensor()),
            AugmentorKind::Uniform => {
                let w = self.spec.init_spread;
                let lb: Vec<f64> = prior.0.iter().map(|x| x - w / 2.0).collect();
                p.push("lb", Tensor::from_f64(&[THETA_DIM], &lb).expect("8"));
                p.push("width_raw", Tensor::full(&[THETA_DIM], T::of(softplus_inv(w))));
            }
            AugmentorKind::Gaussian => {
                p.push("mu", prior.to_tensor());
                p.push("sigma_raw", Tensor::full(&[THETA_DIM], T::of(softplus_inv(self.spec.init_spread))));
            }
            AugmentorKind::Neural => {
                let cfg = &self.spec.neural;
                let mut fan_in = cfg.d_z;
                for (i, &h) in cfg.hidden.iter().enumerate() {
                    p.push(format!("w{i}"), glorot(rng, fan_in, h, 1.0));
                    p.push(format!("b{i}"), Tensor::zeros(&[h]));
                    fan_in = h;
                }
                p.push("w_out", glorot(rng, fan_in, THETA_DIM, cfg.out_scale));
                p.push("b_out", prior.to_tensor());
            }
            AugmentorKind::Predefined(_) => {}
        }
        p
    }

    /// Draws base noise, dropout coins and jitter for clouds of the given
    /// sizes, in that order per sample.
    pub fn draw_noise<T: Real>(&self, n_points: &[usize], rng: &mut impl Rng) -> AugNoise<T> {
        let b = n_points.len();
        let width = match &self.spec.kind {
            AugmentorKind::Uniform | AugmentorKind::Gaussian => THETA_DIM,
            AugmentorKind::Neural => self.spec.neural.d_z,
            _ => 0,
        };
        let gaussian = matches!(self.spec.kind, AugmentorKind::Gaussian | AugmentorKind::Neural);
        let mut base = Vec::with_capacity(b * width);
        let mut keep = Vec::with_capacity(b);
        let mut jitter = Vec::with_capacity(b);
        let mut predefined = Vec::new();
        let ops = self.spec.enabled_ops;
        for &n in n_points {
            for _ in 0..width {
                let x: f64 = if gaussian { StandardNormal.sample(rng) } else { rng.gen() };
                base.push(T::of(x));
            }
            if let AugmentorKind::Predefined(policy) = &self.spec.kind {
                predefined.push(policy.sample(rng));
            }
            let mut k = [false; 4];
            for op in ops.iter() {
                k[op as usize] = self.spec.op_dropout_prob == 0.0 || rng.gen::<f64>() >= self.spec.op_dropout_prob;
            }
            keep.push(k);
            let draw = if ops.contains(Op::J) {
                let d = JitterDraw::sample(n, self.spec.upsilon, rng);
                if k[Op::J as usize] {
                    d
                } else {
                    JitterDraw::zero(n)
                }
            } else {
                JitterDraw::zero(n)
            };
            jitter.push(draw);
        }
        AugNoise {
            base: Tensor::new(&[b, width], base).expect("b×width"),
            keep,
            jitter,
            predefined,
        }
    }

    fn mask_tensors<T: Real>(&self, noise: &AugNoise<T>, with_dropout: bool) -> (Tensor<T>, Tensor<T>) {
        let b = noise.batch_size();
        let enabled = self.spec.enabled_ops.mask();
        let mut keep = Vec::with_capacity(b * THETA_DIM);
        let mut fill = Vec::with_capacity(b * THETA_DIM);
        for k in &noise.keep {
            let mut row = enabled;
            if with_dropout {
                for op in Op::ALL {
                    if !k[op as usize] {
                        for i in op.slots() {
                            row[i] = false;
                        }
                    }
                }
            }
            for i in 0..THETA_DIM {
                keep.push(if row[i] { T::one() } else { T::zero() });
                fill.push(if row[i] { T::zero() } else { T::of(AugParams::IDENTITY.0[i]) });
            }
        }
        (
            Tensor::new(&[b, THETA_DIM], keep).expect("b×8"),
            Tensor::new(&[b, THETA_DIM], fill).expect("b×8"),
        )
    }

    /// `ones(B×1) · row(1×8)`, broadcasting an 8-vector over the batch.
    fn broadcast<T: Real>(tape: &mut Tape<T>, v: Var, b: usize) -> Result<Var> {
        let row = tape.reshape(v, &[1, THETA_DIM])?;
        let ones = tape.constant(Tensor::ones(&[b, 1]));
        tape.matmul(ones, row)
    }

    /// Θ for every sample of the batch as B×8 nodes, differentiable in Φ.
    pub fn sample_theta<T: Real>(&self, tape: &mut Tape<T>, phi: &[Var], noise: &AugNoise<T>) -> Result<ThetaBatch> {
        let b = noise.batch_size();
        if b == 0 {
            return Err(Error::EmptyBatch);
        }
        let dist = match &self.spec.kind {
            AugmentorKind::Fixed => Self::broadcast(tape, phi[0], b)?,
            AugmentorKind::Uniform | AugmentorKind::Gaussian => {
                let spread = tape.softplus(phi[1])?;
                let spread = Self::broadcast(tape, spread, b)?;
                let base = tape.constant(noise.base.clone());
                let scaled = tape.mul(base, spread)?;
                tape.add_bias(scaled, phi[0])?
            }
            AugmentorKind::Neural => {
                let mut h = tape.constant(noise.base.clone());
                let layers = self.spec.neural.hidden.len();
                for l in 0..layers {
                    h = tape.matmul(h, phi[2 * l])?;
                    h = tape.add_bias(h, phi[2 * l + 1])?;
                    h = tape.tanh(h)?;
                }
                h = tape.matmul(h, phi[2 * layers])?;
                tape.add_bias(h, phi[2 * layers + 1])?
            }
            AugmentorKind::Predefined(_) => {
                let flat: Vec<f64> = noise.predefined.iter().flat_map(|p| p.0).collect();
                tape.constant(Tensor::from_f64(&[b, THETA_DIM], &flat)?)
            }
        };
        let dist = match &self.spec.clip {
            Some((lo, hi)) => {
                let lo = Self::tile::<T>(lo, b);
                let hi = Self::tile::<T>(hi, b);
                tape.clamp(dist, lo, hi)?
            }
            None => dist,
        };
        let raw = self.overwrite(tape, dist, noise, false)?;
        let applied = self.overwrite(tape, dist, noise, true)?;
        Ok(ThetaBatch { raw, applied })
    }

    fn tile<T: Real>(row: &[f64; THETA_DIM], b: usize) -> Tensor<T> {
        let flat: Vec<f64> = (0..b).flat_map(|_| row.iter().copied()).collect();
        Tensor::from_f64(&[b, THETA_DIM], &flat).expect("b×8")
    }

    fn overwrite<T: Real>(&self, tape: &mut Tape<T>, theta: Var, noise: &AugNoise<T>, dropout: bool) -> Result<Var> {
        let (keep, fill) = self.mask_tensors(noise, dropout);
        let keep = tape.constant(keep);
        let fill = tape.constant(fill);
        let kept = tape.mul(theta, keep)?;
        tape.add(kept, fill)
    }

    /// Numeric Θ values (raw, applied) without gradient tracking.
    pub fn sample_values<T: Real>(&self, phi: &ParamSet<T>, noise: &AugNoise<T>) -> Result<(Vec<AugParams>, Vec<AugParams>)> {
        let mut tape = Tape::new();
        let vars = phi.register(&mut tape, false);
        let th = self.sample_theta(&mut tape, &vars, noise)?;
        let rows = |v: Var| -> Vec<AugParams> {
            tape.value(v)
                .data()
                .chunks_exact(THETA_DIM)
                .map(|r| {
                    let mut a = [0.0; THETA_DIM];
                    for (x, y) in a.iter_mut().zip(r) {
                        *x = y.f64();
                    }
                    AugParams(a)
                })
                .collect()
        };
        Ok((rows(th.raw), rows(th.applied)))
    }

    /// Augments each cloud with its row of `theta.applied`; returns N×3 nodes.
    pub fn augment<T: Real>(
        &self,
        tape: &mut Tape<T>,
        theta: &ThetaBatch,
        clouds: &[&PointCloud<T>],
        noise: &AugNoise<T>,
    ) -> Result<Vec<Var>> {
        if clouds.len() != noise.batch_size() {
            return Err(Error::MisalignedBatch {
                augmented: noise.batch_size(),
                original: clouds.len(),
            });
        }
        clouds
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let row = tape.slice_rows(theta.applied, i, 1)?;
                let pts = tape.constant(c.points().clone());
                transform::apply(tape, row, pts, &noise.jitter[i])
            })
            .collect()
    }

    /// `λ`-free regularizer toward the prior, restricted to enabled ops.
    /// Fixed and neural kinds average ‖Θ − Θ̂‖² over the batch; uniform uses
    /// the interval midpoint and Gaussian the mean. `None` for baselines.
    pub fn regularizer<T: Real>(&self, tape: &mut Tape<T>, phi: &[Var], theta: &ThetaBatch) -> Result<Option<Var>> {
        let enabled = self.spec.enabled_ops.mask().map(|m| if m { 1.0 } else { 0.0 });
        let prior = self.spec.prior.0;
        let center = match &self.spec.kind {
            AugmentorKind::Predefined(_) => return Ok(None),
            AugmentorKind::Fixed | AugmentorKind::Neural => {
                let b = tape.shape(theta.raw)[0];
                let neg_prior: Vec<f64> = prior.iter().map(|x| -x).collect();
                let neg_prior = tape.constant(Tensor::from_f64(&[THETA_DIM], &neg_prior)?);
                let diff = tape.add_bias(theta.raw, neg_prior)?;
                let mask = tape.constant(Self::tile(&enabled, b));
                let diff = tape.mul(diff, mask)?;
                let sq = tape.mul(diff, diff)?;
                let total = tape.sum(sq)?;
                return Ok(Some(tape.scale(total, T::of(1.0 / b as f64))?));
            }
            AugmentorKind::Uniform => {
                let sp = tape.softplus(phi[1])?;
                let half = tape.scale(sp, T::of(0.5))?;
                tape.add(phi[0], half)?
            }
            AugmentorKind::Gaussian => phi[0],
        };
        let prior = tape.constant(Tensor::from_f64(&[THETA_DIM], &prior)?);
        let diff = tape.sub(center, prior)?;
        let mask = tape.constant(Tensor::from_f64(&[THETA_DIM], &enabled)?);
        let diff = tape.mul(diff, mask)?;
        let sq = tape.mul(diff, diff)?;
        Ok(Some(tape.sum(sq)?))
    }

    /// Serializes the spec and Φ.
    pub fn to_file<T: Real>(&self, phi: &ParamSet<T>) -> ParamFile {
        let mut f = ParamFile::new(format!("augmentor:{}", self.spec.kind));
        self.write_spec(&mut f);
        phi.write_into(&mut f, "phi");
        f
    }

    pub(crate) fn write_spec(&self, f: &mut ParamFile) {
        let s = &self.spec;
        f.push_words("aug/ops", &[s.enabled_ops.bits() as u64]);
        f.push("aug/dropout", vec![1], vec![s.op_dropout_prob]);
        f.push("aug/prior", vec![THETA_DIM], s.prior.0.to_vec());
        f.push("aug/upsilon", vec![1], vec![s.upsilon]);
        f.push("aug/init_spread", vec![1], vec![s.init_spread]);
        let mut layout = vec![s.neural.d_z as u64];
        layout.extend(s.neural.hidden.iter().map(|&h| h as u64));
        f.push_words("aug/neural", &layout);
        f.push("aug/out_scale", vec![1], vec![s.neural.out_scale]);
        if let Some((lo, hi)) = &s.clip {
            f.push("aug/clip", vec![2, THETA_DIM], lo.iter().chain(hi).copied().collect());
        }
    }

    pub(crate) fn read_spec(f: &ParamFile, kind: AugmentorKind) -> Result<AugmentorSpec> {
        let ops = OpSet::from_bits(f.words("aug/ops")?.first().copied().unwrap_or(0) as u8)?;
        let prior = f
            .block("aug/prior")
            .filter(|b| b.data.len() == THETA_DIM)
            .ok_or_else(|| Error::Format("missing prior".into()))?;
        let layout = f.words("aug/neural")?;
        let (&d_z, hidden) = layout.split_first().ok_or_else(|| Error::Format("empty neural layout".into()))?;
        let clip = f.block("aug/clip").map(|b| {
            let mut lo = [0.0; THETA_DIM];
            let mut hi = [0.0; THETA_DIM];
            lo.copy_from_slice(&b.data[..THETA_DIM]);
            hi.copy_from_slice(&b.data[THETA_DIM..]);
            (lo, hi)
        });
        let mut p = [0.0; THETA_DIM];
        p.copy_from_slice(&prior.data);
        let spec = AugmentorSpec {
            kind,
            enabled_ops: ops,
            op_dropout_prob: f.scalar("aug/dropout")?,
            clip,
            prior: AugParams(p),
            upsilon: f.scalar("aug/upsilon")?,
            neural: NeuralConfig {
                d_z: d_z as usize,
                hidden: hidden.iter().map(|&h| h as usize).collect(),
                out_scale: f.scalar("aug/out_scale")?,
            },
            init_spread: f.scalar("aug/init_spread")?,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Inverse of [`Self::to_file`].
    pub fn from_file<T: Real>(f: &ParamFile) -> Result<(Self, ParamSet<T>)> {
        let kind: AugmentorKind = f
            .tag
            .strip_prefix("augmentor:")
            .ok_or_else(|| Error::Format(format!("not an augmentor file: `{}`", f.tag)))?
            .parse()?;
        let aug = Augmentor::new(Self::read_spec(f, kind)?)?;
        let mut phi = aug.init_params(&mut rand::SeedableRng::seed_from_u64(0));
        phi.read_from(f, "phi")?;
        Ok((aug, phi))
    }
}
