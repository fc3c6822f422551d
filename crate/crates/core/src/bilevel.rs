//! One-step-unrolled bilevel optimization of augmentor parameters Φ against
//! classifier weights Ω.
//!
//! Per minibatch:
//!
//! 1. virtual step `Ω' = Ω − ξ ∇_Ω l_tr(Ω, Φ)` (plain descent, recorded noise);
//! 2. `v = ∇_{Ω'} l_val(Ω')`, `ε = 0.01 / ‖v‖`, `Ω± = Ω ± ε v`, and
//!    `g_Φ = −ξ (∇_Φ l_tr(Ω⁺) − ∇_Φ l_tr(Ω⁻)) / 2ε + λ ∇_Φ l_reg`;
//! 3. optimizer step on Φ with `g_Φ`;
//! 4. optimizer step on Ω from `∇_Ω l_tr(Ω, Φ)` with noise drawn afresh.

use log::warn;
use rand_chacha::ChaCha8Rng;

use crate::augmentor::{AugNoise, Augmentor};
use crate::classifier::Classifier;
use crate::error::{Error, Result};
use crate::optim::{clip_global_norm, halving_lr, OptimKind, Optimizer};
use crate::params::{ParamFile, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::Real;
use crate::transform::PointCloud;

/// Losses the bilevel machinery needs. `Noise` is every random draw a
/// training loss depends on, so evaluations can be replayed exactly.
pub trait BilevelProblem<T: Real> {
    type Batch: ?Sized;
    type Noise;

    fn draw_noise(&self, batch: &Self::Batch, rng: &mut ChaCha8Rng) -> Self::Noise;

    fn train_loss(&self, tape: &mut Tape<T>, omega: &[Var], phi: &[Var], batch: &Self::Batch, noise: &Self::Noise) -> Result<Var>;

    fn val_loss(&self, tape: &mut Tape<T>, omega: &[Var], batch: &Self::Batch) -> Result<Var>;

    /// Unweighted regularizer on Φ, or `None` when there is none.
    fn reg_loss(&self, tape: &mut Tape<T>, phi: &[Var], noise: &Self::Noise) -> Result<Option<Var>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct BilevelConfig {
    /// Initial classifier learning rate ξ₀; also the virtual-step size.
    pub xi: f64,
    /// Augmentor learning rate α.
    pub alpha: f64,
    pub lambda: f64,
    /// Epochs between halvings of ξ; 0 keeps it constant.
    pub lr_halving_period: usize,
    /// Numerator of ε = c / ‖v‖.
    pub eps_scale: f64,
    /// Global-norm bound on the hypergradient before the Φ step.
    pub clip: Option<f64>,
    pub outer: OptimKind,
    pub inner: OptimKind,
    /// When false Φ is frozen and steps 1–3 are skipped.
    pub learn_phi: bool,
    /// When false Ω is never updated (diagnostics).
    pub learn_omega: bool,
}

impl Default for BilevelConfig {
    fn default() -> Self {
        BilevelConfig {
            xi: 0.001,
            alpha: 0.001,
            lambda: 0.5,
            lr_halving_period: 20,
            eps_scale: 0.01,
            clip: None,
            outer: OptimKind::Adam,
            inner: OptimKind::Adam,
            learn_phi: true,
            learn_omega: true,
        }
    }
}

impl BilevelConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.xi > 0.0 && self.alpha >= 0.0 && self.lambda >= 0.0 && self.eps_scale > 0.0;
        if !ok || [self.xi, self.alpha, self.lambda, self.eps_scale].iter().any(|x| !x.is_finite()) {
            return Err(Error::Invalid(format!(
                "need ξ > 0, α ≥ 0, λ ≥ 0 (got ξ={}, α={}, λ={})",
                self.xi, self.alpha, self.lambda
            )));
        }
        if matches!(self.clip, Some(c) if !(c > 0.0)) {
            return Err(Error::Invalid("clip norm must be positive".into()));
        }
        Ok(())
    }

    /// Classifier learning rate in `epoch` (0-based).
    pub fn xi_at(&self, epoch: usize) -> f64 {
        halving_lr(self.xi, epoch, self.lr_halving_period)
    }
}

fn grads_of<T: Real>(params: &ParamSet<T>, tape: &Tape<T>, vars: &[Var], loss: Var) -> Result<ParamSet<T>> {
    let g = tape.backward(loss)?;
    Ok(params.gradients(&g, vars))
}

/// `(l_tr, ∇_Ω l_tr)` at (Ω, Φ) with Φ held constant.
pub fn train_grad_omega<T: Real, P: BilevelProblem<T>>(
    problem: &P,
    omega: &ParamSet<T>,
    phi: &ParamSet<T>,
    batch: &P::Batch,
    noise: &P::Noise,
) -> Result<(f64, ParamSet<T>)> {
    let mut tape = Tape::new();
    let w = omega.register(&mut tape, true);
    let f = phi.register(&mut tape, false);
    let loss = problem.train_loss(&mut tape, &w, &f, batch, noise)?;
    Ok((tape.value(loss).item().f64(), grads_of(omega, &tape, &w, loss)?))
}

/// `∇_Φ l_tr` at (Ω, Φ) with Ω held constant.
pub fn train_grad_phi<T: Real, P: BilevelProblem<T>>(
    problem: &P,
    omega: &ParamSet<T>,
    phi: &ParamSet<T>,
    batch: &P::Batch,
    noise: &P::Noise,
) -> Result<ParamSet<T>> {
    let mut tape = Tape::new();
    let w = omega.register(&mut tape, false);
    let f = phi.register(&mut tape, true);
    let loss = problem.train_loss(&mut tape, &w, &f, batch, noise)?;
    grads_of(phi, &tape, &f, loss)
}

/// `(l_val, ∇_Ω l_val)` at Ω.
pub fn val_grad<T: Real, P: BilevelProblem<T>>(problem: &P, omega: &ParamSet<T>, batch: &P::Batch) -> Result<(f64, ParamSet<T>)> {
    let mut tape = Tape::new();
    let w = omega.register(&mut tape, true);
    let loss = problem.val_loss(&mut tape, &w, batch)?;
    Ok((tape.value(loss).item().f64(), grads_of(omega, &tape, &w, loss)?))
}

/// `∇_Φ l_reg`, or `None` when the problem has no regularizer.
pub fn reg_grad<T: Real, P: BilevelProblem<T>>(problem: &P, phi: &ParamSet<T>, noise: &P::Noise) -> Result<Option<ParamSet<T>>> {
    let mut tape = Tape::new();
    let f = phi.register(&mut tape, true);
    match problem.reg_loss(&mut tape, &f, noise)? {
        Some(loss) => Ok(Some(grads_of(phi, &tape, &f, loss)?)),
        None => Ok(None),
    }
}

/// Virtual weights `Ω' = Ω − ξ ∇_Ω l_tr(Ω, Φ)`; also returns `l_tr(Ω, Φ)`.
pub fn inner_step<T: Real, P: BilevelProblem<T>>(
    problem: &P,
    omega: &ParamSet<T>,
    phi: &ParamSet<T>,
    batch: &P::Batch,
    noise: &P::Noise,
    xi: f64,
) -> Result<(ParamSet<T>, f64)> {
    let (loss, g) = train_grad_omega(problem, omega, phi, batch, noise)?;
    Ok((omega.plus_scaled(T::of(-xi), &g), loss))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypergradient<T> {
    /// Total `−ξ·HVP + λ ∇reg`.
    pub grad: ParamSet<T>,
    /// The finite-difference term alone.
    pub fd: ParamSet<T>,
    /// `l_val(Ω')`.
    pub val_loss: f64,
    /// `‖∇_{Ω'} l_val‖`.
    pub v_norm: f64,
    /// `None` when ‖v‖ = 0 and the finite-difference term was skipped.
    pub eps: Option<f64>,
}

/// Finite-difference hypergradient of `l_val(Ω'(Φ))` plus the weighted
/// regularizer gradient. `omega_prime` must come from [`inner_step`] with the
/// same `noise`.
#[allow(clippy::too_many_arguments)]
pub fn hypergradient<T: Real, P: BilevelProblem<T>>(
    problem: &P,
    omega: &ParamSet<T>,
    phi: &ParamSet<T>,
    omega_prime: &ParamSet<T>,
    train: &P::Batch,
    val: &P::Batch,
    noise: &P::Noise,
    xi: f64,
    eps_scale: f64,
    lambda: f64,
) -> Result<Hypergradient<T>> {
    let (val_loss, v) = val_grad(problem, omega_prime, val)?;
    let v_norm = v.norm().f64();
    if !v_norm.is_finite() {
        return Err(Error::NonFinite { op: "hypergradient" });
    }
    let (fd, eps) = if v_norm > 0.0 {
        let eps = eps_scale / v_norm;
        let plus = omega.plus_scaled(T::of(eps), &v);
        let minus = omega.plus_scaled(T::of(-eps), &v);
        let gp = train_grad_phi(problem, &plus, phi, train, noise)?;
        let gm = train_grad_phi(problem, &minus, phi, train, noise)?;
        let mut fd = gp.plus_scaled(-T::one(), &gm);
        fd.scale(T::of(-xi / (2.0 * eps)));
        (fd, Some(eps))
    } else {
        warn!("validation gradient vanished; hypergradient reduces to the regularizer term");
        (phi.zeros_like(), None)
    };
    let mut grad = fd.clone();
    if lambda > 0.0 {
        if let Some(r) = reg_grad(problem, phi, noise)? {
            grad.axpy(T::of(lambda), &r);
        }
    }
    Ok(Hypergradient {
        grad,
        fd,
        val_loss,
        v_norm,
        eps,
    })
}

/// Ground truth `∇_Φ l_val(Ω'(Φ))` by central differences of step `h` over
/// every Φ component, replaying `noise`. Intended for small Φ in 64-bit.
#[allow(clippy::too_many_arguments)]
pub fn hypergrad_oracle<T: Real, P: BilevelProblem<T>>(
    problem: &P,
    omega: &ParamSet<T>,
    phi: &ParamSet<T>,
    train: &P::Batch,
    val: &P::Batch,
    noise: &P::Noise,
    xi: f64,
    h: f64,
) -> Result<ParamSet<T>> {
    let eval = |phi: &ParamSet<T>| -> Result<f64> {
        let (omega_prime, _) = inner_step(problem, omega, phi, train, noise, xi)?;
        let mut tape = Tape::new();
        let w = omega_prime.register(&mut tape, false);
        let l = problem.val_loss(&mut tape, &w, val)?;
        Ok(tape.value(l).item().f64())
    };
    let flat = phi.flatten();
    let mut probe = phi.clone();
    let mut out = Vec::with_capacity(flat.len());
    for i in 0..flat.len() {
        let mut x = flat.clone();
        x[i] = T::of(flat[i].f64() + h);
        probe.assign_flat(&x)?;
        let up = eval(&probe)?;
        x[i] = T::of(flat[i].f64() - h);
        probe.assign_flat(&x)?;
        let down = eval(&probe)?;
        out.push(T::of((up - down) / (2.0 * h)));
    }
    let mut g = phi.zeros_like();
    g.assign_flat(&out)?;
    Ok(g)
}

/// Branch signature of the training loss at (Ω, Φ); see
/// [`Tape::branch_signature`].
pub fn train_branch_signature<T: Real, P: BilevelProblem<T>>(
    problem: &P,
    omega: &ParamSet<T>,
    phi: &ParamSet<T>,
    batch: &P::Batch,
    noise: &P::Noise,
) -> Result<u64> {
    let mut tape = Tape::new();
    let w = omega.register(&mut tape, false);
    let f = phi.register(&mut tape, false);
    problem.train_loss(&mut tape, &w, &f, batch, noise)?;
    Ok(tape.branch_signature())
}

/// Whether the central-difference probes `Ω ± εv` of [`hypergradient`] stay
/// in the same smooth piece of `l_tr` as Ω. When they do not, the
/// finite-difference term straddles a kink and is not a derivative.
#[allow(clippy::too_many_arguments)]
pub fn probes_are_smooth<T: Real, P: BilevelProblem<T>>(
    problem: &P,
    omega: &ParamSet<T>,
    phi: &ParamSet<T>,
    omega_prime: &ParamSet<T>,
    train: &P::Batch,
    val: &P::Batch,
    noise: &P::Noise,
    eps_scale: f64,
) -> Result<bool> {
    let (_, v) = val_grad(problem, omega_prime, val)?;
    let norm = v.norm().f64();
    if norm == 0.0 {
        return Ok(true);
    }
    let eps = eps_scale / norm;
    let base = train_branch_signature(problem, omega, phi, train, noise)?;
    let plus = train_branch_signature(problem, &omega.plus_scaled(T::of(eps), &v), phi, train, noise)?;
    let minus = train_branch_signature(problem, &omega.plus_scaled(T::of(-eps), &v), phi, train, noise)?;
    Ok(base == plus && base == minus)
}

/// Everything that evolves during training, apart from the RNG.
#[derive(Clone, Debug, PartialEq)]
pub struct BilevelState<T> {
    pub omega: ParamSet<T>,
    pub phi: ParamSet<T>,
    pub omega_opt: Optimizer<T>,
    pub phi_opt: Optimizer<T>,
    /// 0-based index of the epoch in progress.
    pub epoch: usize,
    pub step: u64,
}

impl<T: Real> BilevelState<T> {
    pub fn new(omega: ParamSet<T>, phi: ParamSet<T>, config: &BilevelConfig) -> Self {
        BilevelState {
            omega_opt: Optimizer::new(config.inner, &omega),
            phi_opt: Optimizer::new(config.outer, &phi),
            omega,
            phi,
            epoch: 0,
            step: 0,
        }
    }

    pub fn write_into(&self, f: &mut ParamFile) {
        self.omega.write_into(f, "omega");
        self.phi.write_into(f, "phi");
        self.omega_opt.write_into(f, "omega_opt");
        self.phi_opt.write_into(f, "phi_opt");
        f.push_words("bilevel/counters", &[self.epoch as u64, self.step]);
    }

    /// Overwrites a state of matching shapes from `f`.
    pub fn read_from(&mut self, f: &ParamFile) -> Result<()> {
        self.omega.read_from(f, "omega")?;
        self.phi.read_from(f, "phi")?;
        self.omega_opt.read_from(f, "omega_opt")?;
        self.phi_opt.read_from(f, "phi_opt")?;
        match f.words("bilevel/counters")?[..] {
            [epoch, step] => {
                self.epoch = epoch as usize;
                self.step = step;
                Ok(())
            }
            _ => Err(Error::Format("bad bilevel counters".into())),
        }
    }
}

/// Outcome of one minibatch.
#[derive(Clone, Debug)]
pub struct StepReport<N> {
    /// `l_tr(Ω, Φ)` of the realized classifier update, before the step.
    pub train_loss: f64,
    /// `l_val(Ω')` from the hypergradient, when Φ was learned.
    pub val_loss: Option<f64>,
    pub hypergrad_norm: Option<f64>,
    pub eps: Option<f64>,
    /// Noise of the realized classifier update, drawn under the updated Φ.
    pub noise: N,
}

/// Steps 1–4 on one training minibatch and one validation minibatch.
pub fn bilevel_step<T: Real, P: BilevelProblem<T>>(
    problem: &P,
    state: &mut BilevelState<T>,
    train: &P::Batch,
    val: &P::Batch,
    config: &BilevelConfig,
    rng: &mut ChaCha8Rng,
) -> Result<StepReport<P::Noise>> {
    let xi = config.xi_at(state.epoch);
    let mut report = StepReport {
        train_loss: f64::NAN,
        val_loss: None,
        hypergrad_norm: None,
        eps: None,
        noise: problem.draw_noise(train, rng),
    };
    if config.learn_phi {
        let noise = &report.noise;
        let (omega_prime, _) = inner_step(problem, &state.omega, &state.phi, train, noise, xi)?;
        let mut hg = hypergradient(
            problem,
            &state.omega,
            &state.phi,
            &omega_prime,
            train,
            val,
            noise,
            xi,
            config.eps_scale,
            config.lambda,
        )?;
        let norm = match config.clip {
            Some(c) => clip_global_norm(&mut hg.grad, c),
            None => hg.grad.norm().f64(),
        };
        if !norm.is_finite() {
            return Err(Error::NonFinite { op: "hypergradient" });
        }
        if config.alpha > 0.0 {
            state.phi_opt.step(&mut state.phi, &hg.grad, config.alpha);
        }
        report.val_loss = Some(hg.val_loss);
        report.hypergrad_norm = Some(norm);
        report.eps = hg.eps;
        report.noise = problem.draw_noise(train, rng);
    }
    let (loss, g) = train_grad_omega(problem, &state.omega, &state.phi, train, &report.noise)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "train_loss" });
    }
    if config.learn_omega {
        state.omega_opt.step(&mut state.omega, &g, xi);
    }
    report.train_loss = loss;
    state.step += 1;
    Ok(report)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochReport {
    pub train_loss: f64,
    /// Mean `l_val(Ω')` over steps that learned Φ, `NaN` if none did.
    pub val_loss: f64,
    pub steps: usize,
}

/// One pass over `train` batches, pairing step `i` with validation batch
/// `i mod |val|`. Calls `on_step` after every step and advances the epoch.
pub fn train_epoch<T: Real, P: BilevelProblem<T>>(
    problem: &P,
    state: &mut BilevelState<T>,
    train: &[&P::Batch],
    val: &[&P::Batch],
    config: &BilevelConfig,
    rng: &mut ChaCha8Rng,
    mut on_step: impl FnMut(&BilevelState<T>, &StepReport<P::Noise>) -> Result<()>,
) -> Result<EpochReport> {
    if config.learn_phi && val.is_empty() && !train.is_empty() {
        return Err(Error::Invalid("learning Φ needs at least one validation batch".into()));
    }
    let mut report = EpochReport::default();
    let (mut val_sum, mut val_n) = (0.0, 0usize);
    for (i, batch) in train.iter().enumerate() {
        let v = if val.is_empty() { *batch } else { val[i % val.len()] };
        let step = bilevel_step(problem, state, batch, v, config, rng)?;
        report.train_loss += step.train_loss;
        if let Some(l) = step.val_loss {
            val_sum += l;
            val_n += 1;
        }
        on_step(state, &step)?;
        report.steps += 1;
    }
    if report.steps > 0 {
        report.train_loss /= report.steps as f64;
    }
    report.val_loss = if val_n > 0 { val_sum / val_n as f64 } else { f64::NAN };
    state.epoch += 1;
    Ok(report)
}

/// Point-cloud classification with an optional augmentor. Without an
/// augmentor the training loss is plain cross-entropy.
pub struct CloudProblem<'a> {
    pub classifier: &'a Classifier,
    pub augmentor: Option<&'a Augmentor>,
}

impl<T: Real> BilevelProblem<T> for CloudProblem<'_> {
    type Batch = [PointCloud<T>];
    type Noise = Option<AugNoise<T>>;

    fn draw_noise(&self, batch: &[PointCloud<T>], rng: &mut ChaCha8Rng) -> Self::Noise {
        let sizes: Vec<usize> = batch.iter().map(PointCloud::len).collect();
        self.augmentor.map(|a| a.draw_noise(&sizes, rng))
    }

    fn train_loss(&self, tape: &mut Tape<T>, omega: &[Var], phi: &[Var], batch: &[PointCloud<T>], noise: &Self::Noise) -> Result<Var> {
        let refs: Vec<&PointCloud<T>> = batch.iter().collect();
        match (self.augmentor, noise) {
            (Some(a), Some(n)) => {
                let theta = a.sample_theta(tape, phi, n)?;
                let aug = a.augment(tape, &theta, &refs, n)?;
                self.classifier.train_loss(tape, omega, &aug, &refs)
            }
            (None, _) => self.classifier.val_loss(tape, omega, &refs),
            (Some(_), None) => Err(Error::Invalid("augmentor noise missing".into())),
        }
    }

    fn val_loss(&self, tape: &mut Tape<T>, omega: &[Var], batch: &[PointCloud<T>]) -> Result<Var> {
        let refs: Vec<&PointCloud<T>> = batch.iter().collect();
        self.classifier.val_loss(tape, omega, &refs)
    }

    fn reg_loss(&self, tape: &mut Tape<T>, phi: &[Var], noise: &Self::Noise) -> Result<Option<Var>> {
        match (self.augmentor, noise) {
            (Some(a), Some(n)) if a.kind().is_learned() => {
                let theta = a.sample_theta(tape, phi, n)?;
                a.regularizer(tape, phi, &theta)
            }
            _ => Ok(None),
        }
    }
}

/// A one-parameter bilevel problem with closed-form answers:
/// `l_tr = (ω − φ)²`, `l_val = ω²`, `l_reg = (φ − φ̂)²`.
pub mod toy {
    use super::*;
    use crate::tensor::Tensor;

    #[derive(Clone, Copy, Debug, Default)]
    pub struct ScalarToy {
        pub phi_hat: f64,
    }

    pub fn scalar<T: Real>(name: &str, x: f64) -> ParamSet<T> {
        let mut p = ParamSet::new();
        p.push(name, Tensor::scalar(T::of(x)));
        p
    }

    impl<T: Real> BilevelProblem<T> for ScalarToy {
        type Batch = ();
        type Noise = ();

        fn draw_noise(&self, _: &(), _: &mut ChaCha8Rng) {}

        fn train_loss(&self, tape: &mut Tape<T>, omega: &[Var], phi: &[Var], _: &(), _: &()) -> Result<Var> {
            let d = tape.sub(omega[0], phi[0])?;
            let sq = tape.mul(d, d)?;
            tape.sum(sq)
        }

        fn val_loss(&self, tape: &mut Tape<T>, omega: &[Var], _: &()) -> Result<Var> {
            let sq = tape.mul(omega[0], omega[0])?;
            tape.sum(sq)
        }

        fn reg_loss(&self, tape: &mut Tape<T>, phi: &[Var], _: &()) -> Result<Option<Var>> {
            let hat = tape.constant(Tensor::scalar(T::of(self.phi_hat)));
            let d = tape.sub(phi[0], hat)?;
            let sq = tape.mul(d, d)?;
            Ok(Some(tape.sum(sq)?))
        }
    }
}
