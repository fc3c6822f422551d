//! Miniature permutation-invariant classifier: a shared per-point MLP, a
//! max pool over points, and a small fully connected head.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{ParamFile, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};
use crate::transform::PointCloud;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierConfig {
    /// Widths of the shared per-point layers; the last is the feature size.
    pub shared: Vec<usize>,
    pub head: Vec<usize>,
    pub classes: usize,
    /// Weight of the original/augmented feature-difference penalty.
    pub gamma_feat: f64,
    pub activation: Activation,
}

impl ClassifierConfig {
    pub fn new(classes: usize) -> Self {
        ClassifierConfig {
            shared: vec![64, 128],
            head: vec![64],
            classes,
            gamma_feat: 1.0,
            activation: Activation::Relu,
        }
    }

    pub fn feature_dim(&self) -> usize {
        *self.shared.last().unwrap_or(&3)
    }
}

/// Logits (B×C) and pooled global features (B×F).
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub logits: Var,
    pub features: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    config: ClassifierConfig,
}

impl Classifier {
    pub fn new(config: ClassifierConfig) -> Result<Self> {
        if config.classes < 2 {
            return Err(Error::Invalid(format!("need at least 2 classes, got {}", config.classes)));
        }
        if config.shared.is_empty() || config.shared.iter().chain(&config.head).any(|&w| w == 0) {
            return Err(Error::Invalid("layer widths must be positive and the shared MLP nonempty".into()));
        }
        Ok(Classifier { config })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init_params<T: Real>(&self, rng: &mut ChaCha8Rng) -> ParamSet<T> {
        let mut p = ParamSet::new();
        let mut layer = |p: &mut ParamSet<T>, name: &str, fan_in: usize, fan_out: usize| {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = (0..fan_in * fan_out).map(|_| T::of(rng.gen_range(-a..a))).collect();
            p.push(format!("{name}.w"), Tensor::new(&[fan_in, fan_out], w).expect("fan_in×fan_out"));
            p.push(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        };
        let mut fan_in = 3;
        for (i, &w) in self.config.shared.iter().enumerate() {
            layer(&mut p, &format!("shared{i}"), fan_in, w);
            fan_in = w;
        }
        for (i, &w) in self.config.head.iter().enumerate() {
            layer(&mut p, &format!("head{i}"), fan_in, w);
            fan_in = w;
        }
        layer(&mut p, "out", fan_in, self.config.classes);
        p
    }

    fn dense<T: Real>(&self, tape: &mut Tape<T>, x: Var, w: Var, b: Var, act: bool) -> Result<Var> {
        let y = tape.matmul(x, w)?;
        let y = tape.add_bias(y, b)?;
        if !act {
            return Ok(y);
        }
        match self.config.activation {
            Activation::Relu => tape.relu(y),
            Activation::Tanh => tape.tanh(y),
        }
    }

    /// Shared MLP then max pool: one row of global features per cloud.
    pub fn features<T: Real>(&self, tape: &mut Tape<T>, omega: &[Var], clouds: &[Var]) -> Result<Var> {
        if clouds.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let f = self.config.feature_dim();
        let sizes: Vec<usize> = clouds.iter().map(|&c| tape.shape(c)[0]).collect();
        let shared = |tape: &mut Tape<T>, mut h: Var| -> Result<Var> {
            for l in 0..self.config.shared.len() {
                h = self.dense(tape, h, omega[2 * l], omega[2 * l + 1], true)?;
            }
            Ok(h)
        };
        if sizes.iter().all(|&n| n == sizes[0]) {
            let all = if clouds.len() == 1 { clouds[0] } else { tape.concat(clouds, 0)? };
            let h = shared(tape, all)?;
            let h = tape.reshape(h, &[clouds.len(), sizes[0], f])?;
            tape.max_axis(h, 1)
        } else {
            let rows = clouds
                .iter()
                .map(|&c| {
                    let h = shared(tape, c)?;
                    let g = tape.max_axis(h, 0)?;
                    tape.reshape(g, &[1, f])
                })
                .collect::<Result<Vec<_>>>()?;
            tape.concat(&rows, 0)
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, omega: &[Var], clouds: &[Var]) -> Result<Forward> {
        let features = self.features(tape, omega, clouds)?;
        let mut h = features;
        let base = 2 * self.config.shared.len();
        for l in 0..self.config.head.len() {
            h = self.dense(tape, h, omega[base + 2 * l], omega[base + 2 * l + 1], true)?;
        }
        let out = base + 2 * self.config.head.len();
        let logits = self.dense(tape, h, omega[out], omega[out + 1], false)?;
        Ok(Forward { logits, features })
    }

    fn constants<T: Real>(tape: &mut Tape<T>, clouds: &[&PointCloud<T>]) -> Vec<Var> {
        clouds.iter().map(|c| tape.constant(c.points().clone())).collect()
    }

    /// Mean cross-entropy over originals and their augmented copies together,
    /// plus `gamma_feat` times the mean squared difference of paired global
    /// features.
    pub fn train_loss<T: Real>(
        &self,
        tape: &mut Tape<T>,
        omega: &[Var],
        augmented: &[Var],
        original: &[&PointCloud<T>],
    ) -> Result<Var> {
        if augmented.len() != original.len() {
            return Err(Error::MisalignedBatch {
                augmented: augmented.len(),
                original: original.len(),
            });
        }
        if original.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let b = original.len();
        let mut inputs = Self::constants(tape, original);
        inputs.extend_from_slice(augmented);
        let labels: Vec<usize> = original.iter().chain(original).map(|c| c.label()).collect();
        let fw = self.forward(tape, omega, &inputs)?;
        let ce = tape.softmax_ce(fw.logits, &labels)?;
        if self.config.gamma_feat == 0.0 {
            return Ok(ce);
        }
        let g_orig = tape.slice_rows(fw.features, 0, b)?;
        let g_aug = tape.slice_rows(fw.features, b, b)?;
        let d = tape.sub(g_aug, g_orig)?;
        let sq = tape.mul(d, d)?;
        let penalty = tape.mean(sq)?;
        let penalty = tape.scale(penalty, T::of(self.config.gamma_feat))?;
        tape.add(ce, penalty)
    }

    /// Mean cross-entropy with no augmentation. Also the training loss of the
    /// no-augmentation arm.
    pub fn val_loss<T: Real>(&self, tape: &mut Tape<T>, omega: &[Var], clouds: &[&PointCloud<T>]) -> Result<Var> {
        if clouds.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let inputs = Self::constants(tape, clouds);
        let labels: Vec<usize> = clouds.iter().map(|c| c.label()).collect();
        let fw = self.forward(tape, omega, &inputs)?;
        tape.softmax_ce(fw.logits, &labels)
    }

    /// Logits for each cloud, evaluated in chunks.
    pub fn logits<T: Real>(&self, omega: &ParamSet<T>, clouds: &[&PointCloud<T>]) -> Result<Vec<Vec<T>>> {
        let mut out = Vec::with_capacity(clouds.len());
        for chunk in clouds.chunks(64) {
            let mut tape = Tape::new();
            let vars = omega.register(&mut tape, false);
            let inputs = Self::constants(&mut tape, chunk);
            let fw = self.forward(&mut tape, &vars, &inputs)?;
            out.extend(tape.value(fw.logits).data().chunks_exact(self.config.classes).map(<[T]>::to_vec));
        }
        Ok(out)
    }

    pub fn predict<T: Real>(&self, omega: &ParamSet<T>, clouds: &[&PointCloud<T>]) -> Result<Vec<usize>> {
        Ok(self
            .logits(omega, clouds)?
            .iter()
            .map(|row| {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect())
    }

    /// Fraction of correctly classified clouds; 0 for an empty set.
    pub fn accuracy<T: Real>(&self, omega: &ParamSet<T>, clouds: &[&PointCloud<T>]) -> Result<f64> {
        if clouds.is_empty() {
            return Ok(0.0);
        }
        let pred = self.predict(omega, clouds)?;
        let correct = pred.iter().zip(clouds).filter(|(p, c)| **p == c.label()).count();
        Ok(correct as f64 / clouds.len() as f64)
    }

    pub(crate) fn write_config(&self, f: &mut ParamFile) {
        let c = &self.config;
        let mut layout = vec![c.classes as u64, c.shared.len() as u64, c.activation as u64];
        layout.extend(c.shared.iter().chain(&c.head).map(|&w| w as u64));
        f.push_words("clf/layout", &layout);
        f.push("clf/gamma_feat", vec![1], vec![c.gamma_feat]);
    }

    pub(crate) fn read_config(f: &ParamFile) -> Result<ClassifierConfig> {
        let layout = f.words("clf/layout")?;
        if layout.len() < 3 || layout.len() < 3 + layout[1] as usize {
            return Err(Error::Format("truncated classifier layout".into()));
        }
        let n_shared = layout[1] as usize;
        let widths: Vec<usize> = layout[3..].iter().map(|&w| w as usize).collect();
        Ok(ClassifierConfig {
            classes: layout[0] as usize,
            shared: widths[..n_shared].to_vec(),
            head: widths[n_shared..].to_vec(),
            activation: if layout[2] == Activation::Tanh as u64 { Activation::Tanh } else { Activation::Relu },
            gamma_feat: f.scalar("clf/gamma_feat")?,
        })
    }

    pub fn to_file<T: Real>(&self, omega: &ParamSet<T>) -> ParamFile {
        let mut f = ParamFile::new("classifier");
        self.write_config(&mut f);
        omega.write_into(&mut f, "omega");
        f
    }

    pub fn from_file<T: Real>(f: &ParamFile) -> Result<(Self, ParamSet<T>)> {
        let clf = Classifier::new(Self::read_config(f)?)?;
        let mut omega = clf.init_params(&mut rand::SeedableRng::seed_from_u64(0));
        omega.read_from(f, "omega")?;
        Ok((clf, omega))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augmentor::{Augmentor, AugmentorKind, AugmentorSpec, OpSet};
    use crate::gradcheck::grad_check;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn cloud(rng: &mut ChaCha8Rng, n: usize, label: usize) -> PointCloud<f64> {
        let rows: Vec<[f64; 3]> = (0..n)
            .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect();
        PointCloud::from_rows(&rows, label).unwrap()
    }

    fn tiny(classes: usize) -> Classifier {
        Classifier::new(ClassifierConfig {
            shared: vec![6, 8],
            head: vec![5],
            classes,
            gamma_feat: 1.0,
            activation: Activation::Relu,
        })
        .unwrap()
    }

    #[test]
    fn default_size_is_miniature() {
        let c = Classifier::new(ClassifierConfig::new(4)).unwrap();
        let p = c.init_params::<f32>(&mut rng(0));
        assert_eq!(p.numel(), 3 * 64 + 64 + 64 * 128 + 128 + 128 * 64 + 64 + 64 * 4 + 4);
        assert!(p.numel() < 20_000);
        let a = (6.0f64 / (3.0 + 64.0)).sqrt() as f32;
        assert!(p.get("shared0.w").unwrap().data().iter().all(|w| w.abs() <= a));
        assert!(p.get("out.b").unwrap().data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn logits_are_permutation_invariant() {
        let c = Classifier::new(ClassifierConfig::new(4)).unwrap();
        let p = c.init_params::<f64>(&mut rng(1));
        let mut r = rng(2);
        let x = cloud(&mut r, 32, 0);
        let rows: Vec<f64> = (0..32).rev().flat_map(|i| x.points().row(i).to_vec()).collect();
        let y = x.with_points(Tensor::new(&[32, 3], rows).unwrap()).unwrap();
        assert_eq!(c.logits(&p, &[&x]).unwrap(), c.logits(&p, &[&y]).unwrap());
    }

    #[test]
    fn zero_output_layer_gives_ln_c() {
        let c = Classifier::new(ClassifierConfig::new(4)).unwrap();
        let mut p = c.init_params::<f64>(&mut rng(3));
        let zeroed: Vec<f64> = vec![0.0; p.numel()];
        let mut flat = p.flatten();
        let n_out = 64 * 4 + 4;
        let len = flat.len();
        flat[len - n_out..].copy_from_slice(&zeroed[..n_out]);
        p.assign_flat(&flat).unwrap();
        let mut r = rng(4);
        let clouds: Vec<PointCloud<f64>> = (0..5).map(|i| cloud(&mut r, 16, i % 4)).collect();
        let refs: Vec<&PointCloud<f64>> = clouds.iter().collect();
        let mut tape = Tape::new();
        let vars = p.register(&mut tape, false);
        let l = c.val_loss(&mut tape, &vars, &refs).unwrap();
        assert!((tape.value(l).item() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn repeated_point_matches_single_point() {
        let c = Classifier::new(ClassifierConfig::new(3)).unwrap();
        let p = c.init_params::<f64>(&mut rng(5));
        let one = PointCloud::<f64>::from_rows(&[[0.1, -0.4, 0.7]], 0).unwrap();
        let many = PointCloud::<f64>::from_rows(&[[0.1, -0.4, 0.7]; 9], 0).unwrap();
        let feat = |x: &PointCloud<f64>| {
            let mut tape = Tape::new();
            let vars = p.register(&mut tape, false);
            let pts = tape.constant(x.points().clone());
            let f = c.features(&mut tape, &vars, &[pts]).unwrap();
            tape.value(f).clone()
        };
        assert_eq!(feat(&one), feat(&many));
    }

    #[test]
    fn mixed_sizes_match_uniform_path() {
        let c = tiny(3);
        let p = c.init_params::<f64>(&mut rng(6));
        let mut r = rng(7);
        let a = cloud(&mut r, 10, 0);
        let b = cloud(&mut r, 7, 1);
        let batched = c.logits(&p, &[&a, &b]).unwrap();
        assert_eq!(batched[0], c.logits(&p, &[&a]).unwrap()[0]);
        assert_eq!(batched[1], c.logits(&p, &[&b]).unwrap()[0]);
    }

    #[test]
    fn identical_pairs_have_no_penalty() {
        let c = tiny(3);
        let p = c.init_params::<f64>(&mut rng(8));
        let mut r = rng(9);
        let clouds: Vec<PointCloud<f64>> = (0..4).map(|i| cloud(&mut r, 8, i % 3)).collect();
        let refs: Vec<&PointCloud<f64>> = clouds.iter().collect();
        let mut tape = Tape::new();
        let vars = p.register(&mut tape, false);
        let aug: Vec<Var> = clouds.iter().map(|x| tape.constant(x.points().clone())).collect();
        let tr = c.train_loss(&mut tape, &vars, &aug, &refs).unwrap();
        let va = c.val_loss(&mut tape, &vars, &refs).unwrap();
        assert!((tape.value(tr).item() - tape.value(va).item()).abs() < 1e-14);
    }

    #[test]
    fn zero_gamma_is_plain_cross_entropy() {
        let mut cfg = tiny(2).config().clone();
        cfg.gamma_feat = 0.0;
        let c = Classifier::new(cfg).unwrap();
        let p = c.init_params::<f64>(&mut rng(10));
        let mut r = rng(11);
        let orig: Vec<PointCloud<f64>> = (0..3).map(|i| cloud(&mut r, 8, i % 2)).collect();
        let other: Vec<PointCloud<f64>> = (0..3).map(|i| cloud(&mut r, 8, i % 2)).collect();
        let refs: Vec<&PointCloud<f64>> = orig.iter().collect();
        let mut tape = Tape::new();
        let vars = p.register(&mut tape, false);
        let aug: Vec<Var> = other.iter().map(|x| tape.constant(x.points().clone())).collect();
        let tr = c.train_loss(&mut tape, &vars, &aug, &refs).unwrap();
        // oracle: CE over the 6 clouds as one batch
        let both: Vec<&PointCloud<f64>> = orig.iter().chain(&other).collect();
        let ce = c.val_loss(&mut tape, &vars, &both).unwrap();
        assert!((tape.value(tr).item() - tape.value(ce).item()).abs() < 1e-14);
    }

    #[test]
    fn confident_correct_logits_drive_ce_to_zero() {
        let c = tiny(2);
        let mut p = c.init_params::<f64>(&mut rng(12));
        // zero everything in the output layer except a huge bias toward class 1
        let mut flat = p.flatten();
        let len = flat.len();
        flat[len - (5 * 2 + 2)..].iter_mut().for_each(|x| *x = 0.0);
        flat[len - 1] = 50.0;
        p.assign_flat(&flat).unwrap();
        let mut r = rng(13);
        let x = cloud(&mut r, 8, 1);
        let mut tape = Tape::new();
        let vars = p.register(&mut tape, false);
        let l = c.val_loss(&mut tape, &vars, &[&x]).unwrap();
        assert!(tape.value(l).item() < 1e-20);
    }

    #[test]
    fn batch_contract_errors() {
        let c = tiny(2);
        let p = c.init_params::<f64>(&mut rng(14));
        let mut tape = Tape::new();
        let vars = p.register(&mut tape, false);
        assert!(matches!(c.val_loss::<f64>(&mut tape, &vars, &[]), Err(Error::EmptyBatch)));
        let mut r = rng(15);
        let x = cloud(&mut r, 4, 0);
        assert!(matches!(
            c.train_loss(&mut tape, &vars, &[], &[&x]),
            Err(Error::MisalignedBatch { augmented: 0, original: 1 })
        ));
        let bad = cloud(&mut r, 4, 7);
        assert!(matches!(c.val_loss(&mut tape, &vars, &[&bad]), Err(Error::LabelOutOfRange { .. })));
    }

    #[test]
    fn duplicated_batch_has_same_loss() {
        let c = tiny(3);
        let p = c.init_params::<f64>(&mut rng(16));
        let mut r = rng(17);
        let clouds: Vec<PointCloud<f64>> = (0..3).map(|i| cloud(&mut r, 8, i)).collect();
        let once: Vec<&PointCloud<f64>> = clouds.iter().collect();
        let twice: Vec<&PointCloud<f64>> = clouds.iter().chain(&clouds).collect();
        let mut tape = Tape::new();
        let vars = p.register(&mut tape, false);
        let a = c.val_loss(&mut tape, &vars, &once).unwrap();
        let b = c.val_loss(&mut tape, &vars, &twice).unwrap();
        assert!((tape.value(a).item() - tape.value(b).item()).abs() < 1e-15);
    }

    #[test]
    fn val_loss_has_no_path_to_augmentor() {
        let c = tiny(2);
        let a = Augmentor::new(AugmentorSpec::new(AugmentorKind::Gaussian, OpSet::ALL)).unwrap();
        let omega = c.init_params::<f64>(&mut rng(18));
        let phi = a.init_params::<f64>(&mut rng(19));
        let mut r = rng(20);
        let x = cloud(&mut r, 6, 1);
        let mut tape = Tape::new();
        let w = omega.register(&mut tape, true);
        let f = phi.register(&mut tape, true);
        let l = c.val_loss(&mut tape, &w, &[&x]).unwrap();
        let g = tape.backward(l).unwrap();
        for v in f {
            assert!(g.wrt(v).data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn train_loss_gradients_reach_both_parameter_sets() {
        let c = tiny(3);
        let mut r = rng(21);
        let mut checked = 0;
        for kind in [AugmentorKind::Fixed, AugmentorKind::Uniform, AugmentorKind::Gaussian, AugmentorKind::Neural] {
            let mut spec = AugmentorSpec::new(kind, OpSet::ALL);
            spec.neural.hidden = vec![4];
            spec.neural.d_z = 3;
            let a = Augmentor::new(spec).unwrap();
            for _ in 0..3 {
                let omega = c.init_params::<f64>(&mut r);
                let phi = a.init_params::<f64>(&mut r);
                let clouds: Vec<PointCloud<f64>> = (0..3).map(|i| cloud(&mut r, 6, i)).collect();
                let refs: Vec<&PointCloud<f64>> = clouds.iter().collect();
                let noise = a.draw_noise::<f64>(&[6; 3], &mut r);
                let n_omega = omega.len();
                let params: Vec<Tensor<f64>> = omega.tensors().chain(phi.tensors()).cloned().collect();
                let check = grad_check(
                    |t, v| {
                        let th = a.sample_theta(t, &v[n_omega..], &noise)?;
                        let aug = a.augment(t, &th, &refs, &noise)?;
                        c.train_loss(t, &v[..n_omega], &aug, &refs)
                    },
                    &params,
                    1e-6,
                )
                .unwrap();
                if check.kink_margin < 1e-5 {
                    continue;
                }
                checked += 1;
                assert!(check.max_rel_error <= 1e-4, "{}: {} at {:?}", a.kind(), check.max_rel_error, check.worst);
            }
        }
        assert!(checked >= 6, "only {checked} instances away from kinks");
    }

    #[test]
    fn file_round_trip() {
        let c = Classifier::new(ClassifierConfig::new(5)).unwrap();
        let p = c.init_params::<f32>(&mut rng(22));
        let mut buf = Vec::new();
        c.to_file(&p).write_to(&mut buf).unwrap();
        let (c2, p2) = Classifier::from_file::<f32>(&ParamFile::read_from(&buf[..]).unwrap()).unwrap();
        assert_eq!(c, c2);
        assert_eq!(p, p2);
    }
}
