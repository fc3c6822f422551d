//! Finite-difference verification of reverse-mode gradients.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Relative-error floor used in the denominator.
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// (parameter index, element index) of the worst component.
    pub worst: Option<(usize, usize)>,
    pub analytic: Vec<Tensor<f64>>,
    pub numeric: Vec<Tensor<f64>>,
    /// Distance of the unperturbed forward pass to the nearest kink; see
    /// [`Tape::kink_margin`].
    pub kink_margin: f64,
    /// Differenced components whose `p ± h` evaluations left the smooth
    /// piece of `p` (see [`Tape::branch_signature`]); their difference
    /// quotients are not derivatives.
    pub straddled: usize,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Value and branch signature of `f` at `params`.
fn eval<F>(f: &F, params: &[Tensor<f64>]) -> Result<(f64, u64)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok((tape.value(out).item(), tape.branch_signature()))
}

/// Compares reverse-mode gradients of the scalar function `f` at `params`
/// against central differences `(f(p+h) - f(p-h)) / 2h`, componentwise.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(pi, p)| (0..p.len()).map(move |ei| (pi, ei)))
        .collect();
    grad_check_at(f, params, h, &coords)
}

/// Like [`grad_check`], but only the listed `(parameter, element)`
/// components are differenced; the rest of `numeric` stays zero and does not
/// count toward the error.
pub fn grad_check_at<F>(f: F, params: &[Tensor<f64>], h: f64, coords: &[(usize, usize)]) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.wrt(v)).collect();
    let kink_margin = tape.kink_margin();
    let base = tape.branch_signature();
    drop(tape);

    let mut probe = params.to_vec();
    let mut numeric: Vec<Tensor<f64>> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
    let mut max_rel_error = 0.0;
    let mut worst = None;
    let mut straddled = 0;
    for &(pi, ei) in coords {
        let x0 = params[pi].data()[ei];
        probe[pi].data_mut()[ei] = x0 + h;
        let (up, sig_up) = eval(&f, &probe)?;
        probe[pi].data_mut()[ei] = x0 - h;
        let (down, sig_down) = eval(&f, &probe)?;
        probe[pi].data_mut()[ei] = x0;
        straddled += usize::from(sig_up != base || sig_down != base);
        let n = (up - down) / (2.0 * h);
        numeric[pi].data_mut()[ei] = n;
        let err = rel_error(analytic[pi].data()[ei], n);
        if err > max_rel_error || worst.is_none() {
            max_rel_error = err.max(max_rel_error);
            worst = Some((pi, ei));
        }
    }
    Ok(GradCheck {
        max_rel_error,
        worst,
        analytic,
        numeric,
        kink_margin,
        straddled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
    }

    #[test]
    fn quadratic_matches_analytic_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = random(&mut rng, &[10], 2.0);
        let check = grad_check(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                t.sum(sq)
            },
            &[w.clone()],
            1e-5,
        )
        .unwrap();
        assert!(check.max_rel_error <= 1e-7, "{}", check.max_rel_error);
        // independent oracle: d/dw ‖w‖² = 2w
        for (a, &x) in check.analytic[0].data().iter().zip(w.data()) {
            assert_eq!(*a, 2.0 * x);
        }
    }

    #[test]
    fn two_layer_tanh_mlp() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // 4×5 + 5 + 5×3 + 3 = 43 parameters, plus a fixed input batch
        let params = vec![
            random(&mut rng, &[4, 5], 0.8),
            random(&mut rng, &[5], 0.3),
            random(&mut rng, &[5, 3], 0.8),
            random(&mut rng, &[3], 0.3),
        ];
        let x = random(&mut rng, &[6, 4], 1.0);
        let check = grad_check(
            |t, v| {
                let x = t.constant(x.clone());
                let h = t.matmul(x, v[0])?;
                let h = t.add_bias(h, v[1])?;
                let h = t.tanh(h)?;
                let o = t.matmul(h, v[2])?;
                let o = t.add_bias(o, v[3])?;
                t.softmax_ce(o, &[0, 1, 2, 0, 1, 2])
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(check.max_rel_error <= 1e-5, "{}", check.max_rel_error);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let check = grad_check(
            |t, _| Ok(t.constant(Tensor::scalar(3.0))),
            &[Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap()],
            1e-5,
        )
        .unwrap();
        assert_eq!(check.max_rel_error, 0.0);
    }

    /// Every primitive, one at a time, on randomized inputs.
    #[test]
    fn every_primitive_matches_central_differences() {
        type Build = fn(&mut Tape<f64>, &[Var]) -> Result<Var>;
        let cases: Vec<(&str, Vec<Vec<usize>>, Build)> = vec![
            ("matmul", vec![vec![3, 4], vec![4, 2]], |t, v| {
                let y = t.matmul(v[0], v[1])?;
                let y = t.tanh(y)?;
                t.sum(y)
            }),
            ("add_sub_mul", vec![vec![2, 3], vec![2, 3]], |t, v| {
                let a = t.add(v[0], v[1])?;
                let s = t.sub(v[0], v[1])?;
                let m = t.mul(a, s)?;
                let m = t.mul(m, v[0])?;
                t.sum(m)
            }),
            ("scale_scale_by", vec![vec![1], vec![4]], |t, v| {
                let y = t.scale_by(v[0], v[1])?;
                let y = t.scale(y, -1.7)?;
                let y = t.mul(y, y)?;
                t.mean(y)
            }),
            ("bias_relu", vec![vec![5, 3], vec![3]], |t, v| {
                let y = t.add_bias(v[0], v[1])?;
                let y = t.relu(y)?;
                let y = t.mul(y, y)?;
                t.sum(y)
            }),
            ("sin_cos_softplus", vec![vec![6]], |t, v| {
                let s = t.sin(v[0])?;
                let c = t.cos(v[0])?;
                let p = t.softplus(v[0])?;
                let y = t.mul(s, c)?;
                let y = t.add(y, p)?;
                t.sum(y)
            }),
            ("max_axis", vec![vec![2, 5, 3]], |t, v| {
                let m = t.max_axis(v[0], 1)?;
                let m = t.tanh(m)?;
                t.sum(m)
            }),
            ("softmax_ce", vec![vec![4, 3]], |t, v| t.softmax_ce(v[0], &[2, 0, 1, 1])),
            ("concat_slice", vec![vec![2, 3], vec![2, 2]], |t, v| {
                let c = t.concat(&[v[0], v[1]], 1)?;
                let r = t.concat(&[c, c], 0)?;
                let s = t.slice_rows(r, 1, 2)?;
                let s = t.slice_cols(s, 2, 5)?;
                let s = t.tanh(s)?;
                let w = t.transpose(s)?;
                let w = t.reshape(w, &[6])?;
                let w = t.mul(w, w)?;
                t.sum(w)
            }),
            ("stack_clamp", vec![vec![3]], |t, v| {
                let a = t.element(v[0], 0)?;
                let b = t.element(v[0], 2)?;
                let m = t.stack(&[2, 2], &[Slot::Var(a), Slot::Const(0.5), Slot::Var(b), Slot::Var(a)])?;
                let c = t.clamp(m, Tensor::full(&[2, 2], -5.0), Tensor::full(&[2, 2], 5.0))?;
                let c = t.mul(c, c)?;
                t.sum(c)
            }),
        ];
        use crate::tape::Slot;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (name, shapes, f) in cases {
            for trial in 0..5 {
                let params: Vec<Tensor<f64>> = shapes.iter().map(|s| random(&mut rng, s, 1.5)).collect();
                let check = grad_check(f, &params, 1e-6).unwrap();
                if check.kink_margin < 1e-4 {
                    continue;
                }
                assert!(
                    check.max_rel_error <= 1e-5,
                    "{name} trial {trial}: {} at {:?}",
                    check.max_rel_error,
                    check.worst
                );
            }
        }
    }

    #[test]
    fn subset_check_only_differences_listed_components() {
        let w = Tensor::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap();
        let check = grad_check_at(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                t.sum(sq)
            },
            &[w],
            1e-5,
            &[(0, 1)],
        )
        .unwrap();
        assert_eq!(check.worst, Some((0, 1)));
        assert_eq!(check.numeric[0].data()[0], 0.0);
        assert!((check.numeric[0].data()[1] + 4.0).abs() < 1e-8);
    }
}
