//! First-order optimizers over a [`ParamSet`].

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::params::{ParamFile, ParamSet};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimKind {
    Adam,
    Sgd,
}

impl fmt::Display for OptimKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimKind::Adam => "adam",
            OptimKind::Sgd => "sgd",
        })
    }
}

impl FromStr for OptimKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "adam" => Ok(OptimKind::Adam),
            "sgd" => Ok(OptimKind::Sgd),
            other => Err(Error::Usage(format!("unknown optimizer `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction, or plain gradient descent.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer<T> {
    pub kind: OptimKind,
    pub adam: AdamConfig,
    m: ParamSet<T>,
    v: ParamSet<T>,
    step: u64,
}

impl<T: Real> Optimizer<T> {
    pub fn new(kind: OptimKind, params: &ParamSet<T>) -> Self {
        Optimizer {
            kind,
            adam: AdamConfig::default(),
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    pub fn adam(params: &ParamSet<T>) -> Self {
        Self::new(OptimKind::Adam, params)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of `params` against `grads` with learning rate `lr`.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &ParamSet<T>, lr: f64) {
        self.step += 1;
        match self.kind {
            OptimKind::Sgd => params.axpy(T::of(-lr), grads),
            OptimKind::Adam => {
                let AdamConfig { beta1, beta2, eps } = self.adam;
                let (b1, b2) = (T::of(beta1), T::of(beta2));
                let c1 = T::of(1.0 - beta1.powi(self.step as i32));
                let c2 = T::of(1.0 - beta2.powi(self.step as i32));
                let (lr, eps) = (T::of(lr), T::of(eps));
                let one = T::one();
                let tensors = params
                    .tensors_mut()
                    .zip(grads.tensors())
                    .zip(self.m.tensors_mut().zip(self.v.tensors_mut()));
                for ((p, g), (m, v)) in tensors {
                    let parts = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut().zip(v.data_mut()));
                    for ((p, &g), (m, v)) in parts {
                        *m = b1 * *m + (one - b1) * g;
                        *v = b2 * *v + (one - b2) * g * g;
                        let m_hat = *m / c1;
                        let v_hat = *v / c2;
                        *p -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
    }

    pub fn write_into(&self, f: &mut ParamFile, prefix: &str) {
        f.push_words(format!("{prefix}/state"), &[self.step, matches!(self.kind, OptimKind::Sgd) as u64]);
        self.m.write_into(f, &format!("{prefix}/m"));
        self.v.write_into(f, &format!("{prefix}/v"));
    }

    pub fn read_from(&mut self, f: &ParamFile, prefix: &str) -> Result<()> {
        let state = f.words(&format!("{prefix}/state"))?;
        if state.len() != 2 {
            return Err(Error::Format(format!("bad optimizer state under `{prefix}`")));
        }
        self.step = state[0];
        self.kind = if state[1] == 1 { OptimKind::Sgd } else { OptimKind::Adam };
        self.m.read_from(f, &format!("{prefix}/m"))?;
        self.v.read_from(f, &format!("{prefix}/v"))?;
        Ok(())
    }
}

/// `base · 2^(-⌊epoch / period⌋)`; a zero period disables halving.
pub fn halving_lr(base: f64, epoch: usize, period: usize) -> f64 {
    if period == 0 {
        return base;
    }
    let halvings = (epoch / period).min(1074) as i32;
    base * 2f64.powi(-halvings)
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut ParamSet<T>, max_norm: f64) -> f64 {
    let norm = grads.norm().f64();
    if norm > max_norm && norm.is_finite() {
        grads.scale(T::of(max_norm / norm));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn set(values: &[f64]) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.push("w", Tensor::from_f64(&[values.len()], values).unwrap());
        p
    }

    #[test]
    fn first_adam_step_moves_by_lr_times_sign() {
        let mut p = set(&[1.0, -2.0, 0.5]);
        let g = set(&[0.3, -4.0, 1e-3]);
        let mut opt = Optimizer::adam(&p);
        opt.step(&mut p, &g, 0.001);
        // m̂ = g and v̂ = g² after one step, so the update is lr·g/(|g|+ε)
        let expect = [1.0 - 0.001 * 0.3 / (0.3 + 1e-8), -2.0 + 0.001 * 4.0 / (4.0 + 1e-8), 0.5 - 0.001 * 1e-3 / (1e-3 + 1e-8)];
        for (a, e) in p.flatten().iter().zip(expect) {
            assert!((a - e).abs() < 1e-15, "{a} vs {e}");
        }
    }

    #[test]
    fn adam_matches_hand_trace() {
        let mut p = set(&[0.0]);
        let mut opt = Optimizer::adam(&p);
        let (b1, b2, lr, eps) = (0.9f64, 0.999f64, 0.01, 1e-8);
        let (mut m, mut v, mut x) = (0.0, 0.0, 0.0);
        for t in 1..=5 {
            let g = 2.0 * (x - 3.0);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            x -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
            let grad = set(&[2.0 * (p.flatten()[0] - 3.0)]);
            opt.step(&mut p, &grad, lr);
            assert!((p.flatten()[0] - x).abs() < 1e-15);
        }
        assert_eq!(opt.steps(), 5);
    }

    #[test]
    fn zero_gradient_from_fresh_state_is_a_no_op() {
        let mut p = set(&[1.5, -0.25]);
        let before = p.clone();
        let mut opt = Optimizer::adam(&p);
        opt.step(&mut p, &set(&[0.0, 0.0]), 0.1);
        assert_eq!(p, before);
    }

    #[test]
    fn sgd_is_plain_descent() {
        let mut p = set(&[1.0]);
        let mut opt = Optimizer::new(OptimKind::Sgd, &p);
        opt.step(&mut p, &set(&[2.0]), 0.1);
        assert!((p.flatten()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn halving_schedule() {
        assert_eq!(halving_lr(0.001, 0, 20), 0.001);
        assert_eq!(halving_lr(0.001, 19, 20), 0.001);
        assert_eq!(halving_lr(0.001, 20, 20), 0.0005);
        assert_eq!(halving_lr(0.001, 45, 20), 0.00025);
        assert_eq!(halving_lr(0.001, 99, 0), 0.001);
        for e in 0..200 {
            assert_eq!(halving_lr(0.001, e, 20), 0.001 * 2f64.powi(-((e / 20) as i32)));
        }
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut g = set(&[30.0, 40.0]);
        assert_eq!(clip_global_norm(&mut g, 10.0), 50.0);
        assert!((g.norm() - 10.0).abs() < 1e-12);
        let mut small = set(&[0.3, 0.4]);
        clip_global_norm(&mut small, 10.0);
        assert_eq!(small, set(&[0.3, 0.4]));
    }

    #[test]
    fn state_round_trips() {
        let mut p = set(&[1.0, 2.0]);
        let mut opt = Optimizer::adam(&p);
        opt.step(&mut p, &set(&[0.1, -0.2]), 0.01);
        let mut f = ParamFile::new("t");
        opt.write_into(&mut f, "opt");
        let mut fresh = Optimizer::adam(&p);
        fresh.read_from(&f, "opt").unwrap();
        assert_eq!(fresh, opt);
    }
}
