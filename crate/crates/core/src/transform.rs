//! Differentiable rigid augmentation of point clouds.
//!
//! Points are row vectors in homogeneous coordinates. An augmentation
//! `Θ = [θ_J, θ_r, θ_s(3), θ_t(3)]` perturbs every coordinate by a jitter
//! drawn from `U(θ_J, θ_J + υ)` and then applies `H = T·R_y·S`:
//!
//! ```text
//! out = (X + J) · Hᵀ
//! ```
//!
//! The jitter is reparameterized as `J = θ_J + υ·u` with `u ~ U(0,1)` held
//! fixed, so `∂J/∂θ_J = 1` per entry. Its homogeneous coordinate is 0.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{Slot, Tape, Var};
use crate::tensor::{Real, Tensor};

pub const THETA_DIM: usize = 8;

/// Positions of each operation inside Θ.
pub mod slots {
    use std::ops::Range;

    pub const JITTER: usize = 0;
    pub const ROTATION: usize = 1;
    pub const SCALE: Range<usize> = 2..5;
    pub const TRANSLATION: Range<usize> = 5..8;
}

/// Default fixed width υ of the jitter interval.
pub const DEFAULT_UPSILON: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud<T> {
    points: Tensor<T>,
    label: usize,
}

impl<T: Real> PointCloud<T> {
    pub fn new(points: Tensor<T>, label: usize) -> Result<Self> {
        match points.dims2() {
            Some((n, 3)) if n >= 1 => Ok(PointCloud { points, label }),
            _ => Err(Error::shape("point_cloud", &[points.shape(), &[0, 3]])),
        }
    }

    pub fn from_rows(rows: &[[f64; 3]], label: usize) -> Result<Self> {
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(Tensor::from_f64(&[rows.len(), 3], &flat)?, label)
    }

    pub fn points(&self) -> &Tensor<T> {
        &self.points
    }

    pub fn label(&self) -> usize {
        self.label
    }

    pub fn len(&self) -> usize {
        self.points.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn point(&self, i: usize) -> [T; 3] {
        let r = self.points.row(i);
        [r[0], r[1], r[2]]
    }

    pub fn centroid(&self) -> [f64; 3] {
        let mut c = [0.0; 3];
        for row in self.points.data().chunks_exact(3) {
            for k in 0..3 {
                c[k] += row[k].f64();
            }
        }
        c.map(|x| x / self.len() as f64)
    }

    /// Centers on the centroid and scales so the farthest point has norm 1.
    pub fn normalized(&self) -> Self {
        let c = self.centroid();
        let mut centered: Vec<f64> = Vec::with_capacity(self.points.len());
        for row in self.points.data().chunks_exact(3) {
            for k in 0..3 {
                centered.push(row[k].f64() - c[k]);
            }
        }
        let max_norm = centered
            .chunks_exact(3)
            .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
            .fold(0.0, f64::max);
        let s = if max_norm > 0.0 { 1.0 / max_norm } else { 1.0 };
        let data = centered.iter().map(|&x| T::of(x * s)).collect();
        PointCloud {
            points: Tensor::new(self.points.shape(), data).expect("same shape"),
            label: self.label,
        }
    }

    pub fn with_points(&self, points: Tensor<T>) -> Result<Self> {
        Self::new(points, self.label)
    }

    /// Rotates every point by `R_y(angle)` (column-vector convention).
    pub fn rotated_y(&self, angle: f64) -> Self {
        PointCloud {
            points: rotate_y(&self.points, angle),
            label: self.label,
        }
    }

    pub fn cast<U: Real>(&self) -> PointCloud<U> {
        PointCloud {
            points: self.points.cast(),
            label: self.label,
        }
    }
}

/// A concrete augmentation vector Θ.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugParams(pub [f64; THETA_DIM]);

impl AugParams {
    pub const IDENTITY: AugParams = AugParams([0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0]);

    pub fn jitter(&self) -> f64 {
        self.0[slots::JITTER]
    }

    pub fn rotation(&self) -> f64 {
        self.0[slots::ROTATION]
    }

    pub fn scale(&self) -> [f64; 3] {
        let s = &self.0[slots::SCALE];
        [s[0], s[1], s[2]]
    }

    pub fn translation(&self) -> [f64; 3] {
        let t = &self.0[slots::TRANSLATION];
        [t[0], t[1], t[2]]
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_f64(&[THETA_DIM], &self.0).expect("8 values")
    }

    /// `H = T·R_y·S` as a plain matrix.
    pub fn matrix(&self) -> [[f64; 4]; 4] {
        let (s, c) = self.rotation().sin_cos();
        let [sx, sy, sz] = self.scale();
        let [tx, ty, tz] = self.translation();
        [
            [c * sx, 0.0, s * sz, tx],
            [0.0, sy, 0.0, ty],
            [-s * sx, 0.0, c * sz, tz],
            [0.0, 0.0, 0.0, 1.0],
        ]
    }
}

impl Default for AugParams {
    fn default() -> Self {
        Self::IDENTITY
    }
}

/// Base uniform samples for one cloud's jitter, held constant under
/// differentiation.
#[derive(Clone, Debug, PartialEq)]
pub struct JitterDraw<T> {
    pub u: Tensor<T>,
    pub upsilon: T,
}

impl<T: Real> JitterDraw<T> {
    pub fn sample(n_points: usize, upsilon: f64, rng: &mut impl Rng) -> Self {
        let u = (0..n_points * 3).map(|_| T::of(rng.gen::<f64>())).collect();
        JitterDraw {
            u: Tensor::new(&[n_points, 3], u).expect("n×3"),
            upsilon: T::of(upsilon),
        }
    }

    /// A draw that contributes no jitter beyond `θ_J`.
    pub fn zero(n_points: usize) -> Self {
        JitterDraw {
            u: Tensor::zeros(&[n_points, 3]),
            upsilon: T::zero(),
        }
    }
}

/// Builds the 4×4 homogeneous `H = T(θ_t)·R_y(θ_r)·S(θ_s)` from an
/// 8-element Θ node.
pub fn build_transform<T: Real>(tape: &mut Tape<T>, theta: Var) -> Result<Var> {
    if tape.value(theta).len() != THETA_DIM {
        return Err(Error::shape("build_transform", &[tape.shape(theta), &[THETA_DIM]]));
    }
    let el: Vec<Var> = (0..THETA_DIM)
        .map(|i| tape.element(theta, i))
        .collect::<Result<_>>()?;
    let (z, o) = (Slot::Const(T::zero()), Slot::Const(T::one()));
    let v = Slot::Var;

    let r = el[slots::ROTATION];
    let c = tape.cos(r)?;
    let s = tape.sin(r)?;
    let ns = tape.scale(s, -T::one())?;
    #[rustfmt::skip]
    let rot = tape.stack(&[4, 4], &[
        v(c),  z, v(s), z,
        z,     o, z,    z,
        v(ns), z, v(c), z,
        z,     z, z,    o,
    ])?;
    let [sx, sy, sz] = [el[2], el[3], el[4]];
    #[rustfmt::skip]
    let scale = tape.stack(&[4, 4], &[
        v(sx), z,     z,     z,
        z,     v(sy), z,     z,
        z,     z,     v(sz), z,
        z,     z,     z,     o,
    ])?;
    let [tx, ty, tz] = [el[5], el[6], el[7]];
    #[rustfmt::skip]
    let trans = tape.stack(&[4, 4], &[
        o, z, z, v(tx),
        z, o, z, v(ty),
        z, z, o, v(tz),
        z, z, z, o,
    ])?;
    let rs = tape.matmul(rot, scale)?;
    tape.matmul(trans, rs)
}

/// `J = θ_J + υ·u`, an N×3 node.
pub fn sample_jitter<T: Real>(tape: &mut Tape<T>, theta_j: Var, draw: &JitterDraw<T>) -> Result<Var> {
    let shape = draw.u.shape().to_vec();
    let ones = tape.constant(Tensor::ones(&shape));
    let offset = tape.scale_by(theta_j, ones)?;
    let spread = tape.constant(draw.u.map(|x| x * draw.upsilon));
    tape.add(offset, spread)
}

/// `(X + J(Θ)) · H(Θ)ᵀ` for one cloud, returned as N×3.
pub fn apply<T: Real>(tape: &mut Tape<T>, theta: Var, points: Var, draw: &JitterDraw<T>) -> Result<Var> {
    let (n, d) = tape
        .value(points)
        .dims2()
        .ok_or_else(|| Error::shape("apply", &[tape.shape(points)]))?;
    if d != 3 || draw.u.shape() != [n, 3] {
        return Err(Error::shape("apply", &[tape.shape(points), draw.u.shape()]));
    }
    let h = build_transform(tape, theta)?;
    let theta_j = tape.element(theta, slots::JITTER)?;
    let jitter = sample_jitter(tape, theta_j, draw)?;

    let ones = tape.constant(Tensor::ones(&[n, 1]));
    let zeros = tape.constant(Tensor::zeros(&[n, 1]));
    let x_h = tape.concat(&[points, ones], 1)?;
    let j_h = tape.concat(&[jitter, zeros], 1)?;
    let perturbed = tape.add(x_h, j_h)?;
    let h_t = tape.transpose(h)?;
    let out = tape.matmul(perturbed, h_t)?;
    tape.slice_cols(out, 0, 3)
}

/// Applies a known Θ without recording gradients.
pub fn apply_params<T: Real>(theta: &AugParams, cloud: &PointCloud<T>, draw: &JitterDraw<T>) -> Result<PointCloud<T>> {
    let mut tape = Tape::new();
    let th = tape.constant(theta.to_tensor());
    let pts = tape.constant(cloud.points().clone());
    let out = apply(&mut tape, th, pts, draw)?;
    cloud.with_points(tape.value(out).clone())
}

/// `p ↦ R_y(angle)·p` with `R_y = [[c,0,s],[0,1,0],[-s,0,c]]`.
pub fn rotate_y<T: Real>(points: &Tensor<T>, angle: f64) -> Tensor<T> {
    let (s, c) = angle.sin_cos();
    let mut out = points.clone();
    for row in out.data_mut().chunks_exact_mut(3) {
        let (x, z) = (row[0].f64(), row[2].f64());
        row[0] = T::of(c * x + s * z);
        row[2] = T::of(-s * x + c * z);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn h_of(theta: AugParams) -> Tensor<f64> {
        let mut tape = Tape::new();
        let th = tape.constant(theta.to_tensor());
        let h = build_transform(&mut tape, th).unwrap();
        tape.value(h).clone()
    }

    fn act(h: &Tensor<f64>, p: [f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (i, o) in out.iter_mut().enumerate() {
            *o = h.at(&[i, 0]) * p[0] + h.at(&[i, 1]) * p[1] + h.at(&[i, 2]) * p[2] + h.at(&[i, 3]);
        }
        out
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud<f64> {
        let rows: Vec<[f64; 3]> = (0..n)
            .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect();
        PointCloud::from_rows(&rows, 0).unwrap().normalized()
    }

    #[test]
    fn identity_theta_gives_identity_matrix() {
        let h = h_of(AugParams::IDENTITY);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(h.at(&[i, j]), if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn quarter_turn_about_y() {
        let mut th = AugParams::IDENTITY;
        th.0[slots::ROTATION] = FRAC_PI_2;
        let p = act(&h_of(th), [1.0, 0.0, 0.0]);
        assert!((p[0]).abs() < 1e-15 && p[1] == 0.0 && (p[2] + 1.0).abs() < 1e-15, "{p:?}");
    }

    #[test]
    fn diagonal_scaling() {
        let mut th = AugParams::IDENTITY;
        th.0[slots::SCALE.start] = 2.0;
        assert_eq!(act(&h_of(th), [1.0, 1.0, 1.0]), [2.0, 1.0, 1.0]);
    }

    #[test]
    fn matrix_agrees_with_tape() {
        let th = AugParams([0.01, 0.7, 1.2, 0.8, 1.1, 0.1, -0.2, 0.3]);
        let h = h_of(th);
        let m = th.matrix();
        for i in 0..4 {
            for j in 0..4 {
                assert!((h.at(&[i, j]) - m[i][j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn symmetric_jitter_midpoint_is_zero() {
        let mut tape = Tape::<f64>::new();
        let tj = tape.constant(Tensor::scalar(-0.025));
        let draw = JitterDraw {
            u: Tensor::full(&[5, 3], 0.5),
            upsilon: 0.05,
        };
        let j: Var = sample_jitter(&mut tape, tj, &draw).unwrap();
        assert!(tape.value(j).data().iter().all(|&x: &f64| x.abs() < 1e-18));

        let tj0 = tape.constant(Tensor::scalar(0.0));
        let j0 = sample_jitter(&mut tape, tj0, &JitterDraw::<f64>::zero(5)).unwrap();
        assert!(tape.value(j0).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn jitter_offset_gradient_counts_entries() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let draw = JitterDraw::<f64>::sample(10, 0.05, &mut rng);
        let check = grad_check(
            |t, v| {
                let j = sample_jitter(t, v[0], &draw)?;
                t.sum(j)
            },
            &[Tensor::scalar(0.01)],
            1e-6,
        )
        .unwrap();
        assert!((check.analytic[0].item() - 30.0).abs() < 1e-12);
        assert!(check.max_rel_error < 1e-8);
    }

    #[test]
    fn identity_apply_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cloud = random_cloud(&mut rng, 64);
        let draw = JitterDraw {
            u: JitterDraw::<f64>::sample(64, 0.05, &mut rng).u,
            upsilon: 0.0,
        };
        let out = apply_params(&AugParams::IDENTITY, &cloud, &draw).unwrap();
        for (a, b) in out.points().data().iter().zip(cloud.points().data()) {
            assert!((a - b).abs() <= 1e-12);
        }
        assert_eq!(out.label(), cloud.label());
    }

    #[test]
    fn pure_translation_shifts_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cloud = random_cloud(&mut rng, 20);
        let mut th = AugParams::IDENTITY;
        th.0[slots::TRANSLATION.start] = 0.1;
        let out = apply_params(&th, &cloud, &JitterDraw::zero(20)).unwrap();
        for i in 0..20 {
            let (a, b) = (out.point(i), cloud.point(i));
            assert!((a[0] - b[0] - 0.1).abs() < 1e-15);
            assert_eq!((a[1], a[2]), (b[1], b[2]));
        }
    }

    #[test]
    fn rotation_preserves_norms_and_distances() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cloud = random_cloud(&mut rng, 32);
        let mut th = AugParams::IDENTITY;
        th.0[slots::ROTATION] = 1.234;
        let out = apply_params(&th, &cloud, &JitterDraw::zero(32)).unwrap();
        let norm = |p: [f64; 3]| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        let dist = |a: [f64; 3], b: [f64; 3]| norm([a[0] - b[0], a[1] - b[1], a[2] - b[2]]);
        for i in 0..32 {
            assert!((norm(out.point(i)) - norm(cloud.point(i))).abs() <= 1e-9);
            for j in 0..32 {
                let d = dist(out.point(i), out.point(j)) - dist(cloud.point(i), cloud.point(j));
                assert!(d.abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn tape_rotation_matches_rotate_y() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cloud = random_cloud(&mut rng, 16);
        let mut th = AugParams::IDENTITY;
        th.0[slots::ROTATION] = 0.7;
        let a = apply_params(&th, &cloud, &JitterDraw::zero(16)).unwrap();
        let b = cloud.rotated_y(0.7);
        for (x, y) in a.points().data().iter().zip(b.points().data()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn all_eight_components_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..5 {
            let cloud = random_cloud(&mut rng, 12);
            let draw = JitterDraw::<f64>::sample(12, 0.05, &mut rng);
            let weights = Tensor::new(&[12, 3], (0..36).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let theta = AugParams([
                rng.gen_range(-0.05..0.05),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(0.6..1.5),
                rng.gen_range(0.6..1.5),
                rng.gen_range(0.6..1.5),
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-0.3..0.3),
            ]);
            let check = grad_check(
                |t, v| {
                    let pts = t.constant(cloud.points().clone());
                    let out = apply(t, v[0], pts, &draw)?;
                    let w = t.constant(weights.clone());
                    let y = t.mul(out, w)?;
                    let y = t.tanh(y)?;
                    t.sum(y)
                },
                &[theta.to_tensor()],
                1e-6,
            )
            .unwrap();
            assert!(check.max_rel_error <= 1e-4, "{}", check.max_rel_error);
            assert!(check.analytic[0].data().iter().all(|g| *g != 0.0));
        }
    }

    #[test]
    fn input_cloud_is_not_mutated() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cloud = random_cloud(&mut rng, 8);
        let before = cloud.clone();
        let _ = apply_params(&AugParams([0.0, 1.0, 2.0, 1.0, 1.0, 0.5, 0.0, 0.0]), &cloud, &JitterDraw::zero(8)).unwrap();
        assert_eq!(cloud, before);
    }

    #[test]
    fn normalization_centers_and_bounds() {
        let cloud = PointCloud::<f64>::from_rows(&[[10.0, 2.0, 3.0], [12.0, 2.0, 3.0], [11.0, 5.0, -1.0]], 2).unwrap();
        let n = cloud.normalized();
        let c = n.centroid();
        assert!(c.iter().all(|x| x.abs() < 1e-12));
        let max = (0..3)
            .map(|i| n.point(i).iter().map(|x| x * x).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        assert!((max - 1.0).abs() < 1e-12);
        assert_eq!(n.label(), 2);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(PointCloud::<f64>::new(Tensor::zeros(&[4, 2]), 0).is_err());
        assert!(PointCloud::<f64>::new(Tensor::zeros(&[0, 3]), 0).is_err());
    }

    proptest! {
        #[test]
        fn apply_commutes_with_permutation(seed in any::<u64>(), rot in -3.0f64..3.0, shift in 0usize..16) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cloud = random_cloud(&mut rng, 16);
            let draw = JitterDraw::<f64>::sample(16, 0.05, &mut rng);
            let perm: Vec<usize> = (0..16).map(|i| (i * 5 + shift) % 16).collect();
            let permute = |t: &Tensor<f64>| {
                let data: Vec<f64> = perm.iter().flat_map(|&i| t.row(i).to_vec()).collect();
                Tensor::new(&[16, 3], data).unwrap()
            };
            let theta = AugParams([0.01, rot, 1.1, 0.9, 1.3, 0.1, 0.0, -0.1]);
            let out = apply_params(&theta, &cloud, &draw).unwrap();
            let pdraw = JitterDraw { u: permute(&draw.u), upsilon: draw.upsilon };
            let pout = apply_params(&theta, &cloud.with_points(permute(cloud.points())).unwrap(), &pdraw).unwrap();
            prop_assert_eq!(pout.points(), &permute(out.points()));
        }
    }
}
