//! Executes presets: data preparation, the training loop with per-epoch
//! evaluation, checkpoints and emitted files.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rand_chacha::ChaCha8Rng;

use super::config::{ExperimentConfig, Precision, Preset};
use super::output::{self, EpochRow, RunSummary};
use super::summarize;
use crate::augmentor::{Augmentor, AugmentorKind, AugmentorSpec, OpSet};
use crate::bilevel::{train_epoch, BilevelState, CloudProblem};
use crate::classifier::{Classifier, ClassifierConfig};
use crate::dataset::{self, DataSource};
use crate::error::{Error, Result};
use crate::params::{ParamFile, ParamSet};
use crate::seeds::{self, Purpose};
use crate::tape::Tape;
use crate::tensor::Real;
use crate::transform::{AugParams, PointCloud, THETA_DIM};

pub const METRICS_FILE: &str = "metrics.csv";
pub const THETA_MEAN_FILE: &str = "theta_mean.csv";
pub const CONFIG_FILE: &str = "config_resolved.txt";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const BEST_CHECKPOINT: &str = "checkpoint_best.bin";
pub const LAST_CHECKPOINT: &str = "checkpoint_last.bin";
const CHECKPOINT_TAG: &str = "pcaug-checkpoint";

pub fn hist_file(epoch: usize) -> String {
    format!("theta_hist_epoch{epoch}.csv")
}

/// Training pool, test set and class count, after subsetting and pose shift.
pub struct Data<T> {
    pub pool: Vec<PointCloud<T>>,
    pub test: Vec<PointCloud<T>>,
    pub classes: usize,
}

pub fn prepare_data<T: Real>(cfg: &ExperimentConfig) -> Result<Data<T>> {
    let (mut pool, mut test, classes) = match &cfg.data {
        DataSource::Synthetic => {
            let (pool, test) = dataset::generate::<T>(&cfg.synthetic())?;
            (pool, test, cfg.classes)
        }
        DataSource::Xyz(path) => {
            let all = dataset::load_xyz::<T>(path, cfg.n_points, None, cfg.seed)?;
            let classes = all.iter().map(|c| c.label() + 1).max().unwrap_or(0);
            if classes < 2 {
                return Err(Error::Invalid(format!("{} holds fewer than two classes", path.display())));
            }
            let (pool, test) = dataset::holdout(&all, cfg.test_fraction, cfg.seed)?;
            (pool, test, classes)
        }
    };
    if cfg.subset_fraction < 1.0 {
        pool = dataset::subset(&pool, cfg.subset_fraction, cfg.seed)?;
    }
    let shift = cfg.pose_shift();
    pool = dataset::apply_pose_shift(&pool, shift, true, cfg.seed, 0);
    test = dataset::apply_pose_shift(&test, shift, false, cfg.seed, 1);
    if pool.len() < 2 {
        return Err(Error::Invalid("training pool needs at least two clouds".into()));
    }
    Ok(Data { pool, test, classes })
}

/// The augmentor a config asks for, or `None` for no augmentation.
pub fn build_augmentor(cfg: &ExperimentConfig) -> Result<Option<Augmentor>> {
    let Some(kind) = &cfg.augmentor else {
        return Ok(None);
    };
    let mut spec = match kind {
        AugmentorKind::Predefined(p) => AugmentorSpec::predefined(p.clone()),
        k => AugmentorSpec::new(k.clone(), cfg.ops),
    };
    if let Some(p) = cfg.op_dropout {
        spec = spec.with_dropout(p);
    }
    Augmentor::new(spec).map(Some)
}

/// Outcome of one training run.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub summary: RunSummary,
    pub history: Vec<EpochRow>,
}

struct Best {
    epoch: usize,
    val_acc: f64,
    val_loss: f64,
    test_acc: f64,
    theta: Option<[f64; THETA_DIM]>,
}

fn rng_words(rng: &ChaCha8Rng) -> Vec<u64> {
    let seed = rng.get_seed();
    let mut w: Vec<u64> = seed.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect();
    let pos = rng.get_word_pos();
    w.extend([rng.get_stream(), pos as u64, (pos >> 64) as u64]);
    w
}

fn rng_from_words(w: &[u64]) -> Result<ChaCha8Rng> {
    use rand::SeedableRng;
    if w.len() != 7 {
        return Err(Error::Format("bad RNG state".into()));
    }
    let mut seed = [0u8; 32];
    for (dst, word) in seed.chunks_exact_mut(8).zip(&w[..4]) {
        dst.copy_from_slice(&word.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(w[4]);
    rng.set_word_pos(u128::from(w[5]) | (u128::from(w[6]) << 64));
    Ok(rng)
}

struct Checkpoint<'a, T> {
    config_text: &'a str,
    classifier: &'a Classifier,
    augmentor: Option<&'a Augmentor>,
    state: &'a BilevelState<T>,
    rng: &'a ChaCha8Rng,
    history: &'a [EpochRow],
    theta_means: &'a [(usize, [f64; THETA_DIM])],
    best: &'a Best,
}

impl<T: Real> Checkpoint<'_, T> {
    fn to_file(&self) -> ParamFile {
        let mut f = ParamFile::new(CHECKPOINT_TAG);
        f.push_text("meta/config", self.config_text);
        self.classifier.write_config(&mut f);
        match self.augmentor {
            Some(a) => {
                f.push_text("meta/augmentor", &a.kind().to_string());
                a.write_spec(&mut f);
            }
            None => f.push_text("meta/augmentor", "none"),
        }
        self.state.write_into(&mut f);
        f.push_words("meta/rng", &rng_words(self.rng));
        let b = self.best;
        f.push("meta/best", vec![4], vec![b.epoch as f64, b.val_acc, b.val_loss, b.test_acc]);
        if let Some(t) = b.theta {
            f.push("meta/best_theta", vec![THETA_DIM], t.to_vec());
        }
        let rows: Vec<f64> = self.history.iter().flat_map(|r| r.to_array()).collect();
        f.push("history/metrics", vec![self.history.len(), 6], rows);
        let means: Vec<f64> = self
            .theta_means
            .iter()
            .flat_map(|(e, m)| std::iter::once(*e as f64).chain(m.iter().copied()))
            .collect();
        f.push("history/theta_mean", vec![self.theta_means.len(), THETA_DIM + 1], means);
        f
    }
}

/// Augmentor spec and Φ stored in a checkpoint.
pub fn augmentor_from_checkpoint<T: Real>(f: &ParamFile) -> Result<Option<(Augmentor, ParamSet<T>)>> {
    if f.tag != CHECKPOINT_TAG {
        return Err(Error::Format(format!("not a checkpoint: `{}`", f.tag)));
    }
    let kind = f.text("meta/augmentor")?;
    if kind == "none" {
        return Ok(None);
    }
    let aug = Augmentor::new(Augmentor::read_spec(f, kind.parse()?)?)?;
    let mut phi = aug.init_params::<T>(&mut seeds::rng(0, Purpose::Init, 1));
    phi.read_from(f, "phi")?;
    Ok(Some((aug, phi)))
}

/// Classifier and Ω stored in a checkpoint.
pub fn classifier_from_checkpoint<T: Real>(f: &ParamFile) -> Result<(Classifier, ParamSet<T>)> {
    let clf = Classifier::new(Classifier::read_config(f)?)?;
    let mut omega = clf.init_params::<T>(&mut seeds::rng(0, Purpose::Init, 0));
    omega.read_from(f, "omega")?;
    Ok((clf, omega))
}

/// Mean cross-entropy of `clouds`, evaluated in chunks.
pub fn mean_ce<T: Real>(clf: &Classifier, omega: &ParamSet<T>, clouds: &[&PointCloud<T>]) -> Result<f64> {
    if clouds.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for chunk in clouds.chunks(64) {
        let mut tape = Tape::new();
        let vars = omega.register(&mut tape, false);
        let loss = clf.val_loss(&mut tape, &vars, chunk)?;
        total += tape.value(loss).data()[0].f64() * chunk.len() as f64;
    }
    Ok(total / clouds.len() as f64)
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new().append(true).create(true).open(path)?;
    writeln!(f, "{line}")?;
    Ok(())
}

/// Resumed runs may extend the epoch count; every other key must match.
fn except_epochs(text: &str) -> Vec<&str> {
    text.lines().filter(|l| !l.starts_with("epochs ")).collect()
}

/// Trains one classifier (and augmentor) in `cfg.out`. A `frozen` augmentor
/// is used as is and never updated. With `resume`, continues from
/// `checkpoint_last.bin` when present.
pub fn run_single(cfg: &ExperimentConfig, frozen: Option<(Augmentor, ParamSet<f64>)>, resume: bool) -> Result<RunOutcome> {
    match cfg.precision {
        Precision::F32 => train::<f32>(cfg, frozen, resume),
        Precision::F64 => train::<f64>(cfg, frozen, resume),
    }
}

fn train<T: Real>(cfg: &ExperimentConfig, frozen: Option<(Augmentor, ParamSet<f64>)>, resume: bool) -> Result<RunOutcome> {
    let started = Instant::now();
    let dir = cfg.out.clone();
    fs::create_dir_all(&dir)?;
    let config_text = cfg.to_text();
    fs::write(dir.join(CONFIG_FILE), &config_text)?;

    let data = prepare_data::<T>(cfg)?;
    let clf = Classifier::new(ClassifierConfig {
        gamma_feat: cfg.gamma_feat,
        ..ClassifierConfig::new(data.classes)
    })?;
    let is_frozen = frozen.is_some();
    let (aug, phi) = match frozen {
        Some((a, phi)) => (Some(a), phi.cast::<T>()),
        None => {
            let aug = build_augmentor(cfg)?;
            let phi = match &aug {
                Some(a) => a.init_params::<T>(&mut seeds::rng(cfg.seed, Purpose::Init, 1)),
                None => ParamSet::new(),
            };
            (aug, phi)
        }
    };
    let omega = clf.init_params::<T>(&mut seeds::rng(cfg.seed, Purpose::Init, 0));
    let mut bc = cfg.bilevel.clone();
    bc.learn_phi = !is_frozen && aug.as_ref().is_some_and(|a| a.kind().is_learned());
    let mut state = BilevelState::new(omega, phi, &bc);
    let mut rng = seeds::rng(cfg.seed, Purpose::Training, 0);
    let mut history: Vec<EpochRow> = Vec::new();
    let mut theta_means: Vec<(usize, [f64; THETA_DIM])> = Vec::new();
    let mut best = Best {
        epoch: 0,
        val_acc: f64::NEG_INFINITY,
        val_loss: f64::INFINITY,
        test_acc: f64::NAN,
        theta: None,
    };

    let last_path = dir.join(LAST_CHECKPOINT);
    if resume && last_path.exists() {
        let f = ParamFile::load(&last_path)?;
        if except_epochs(&f.text("meta/config")?) != except_epochs(&config_text) {
            return Err(Error::Usage(format!("{} was written by a different configuration", last_path.display())));
        }
        state.read_from(&f)?;
        rng = rng_from_words(&f.words("meta/rng")?)?;
        let rows = f.block("history/metrics").ok_or_else(|| Error::Format("missing history".into()))?;
        history = rows.data.chunks_exact(6).map(EpochRow::from_array).collect();
        if let Some(b) = f.block("history/theta_mean") {
            theta_means = b
                .data
                .chunks_exact(THETA_DIM + 1)
                .map(|c| (c[0] as usize, c[1..].try_into().expect("8 values")))
                .collect();
        }
        let b = f.block("meta/best").filter(|b| b.data.len() == 4).ok_or_else(|| Error::Format("missing best".into()))?;
        best = Best {
            epoch: b.data[0] as usize,
            val_acc: b.data[1],
            val_loss: b.data[2],
            test_acc: b.data[3],
            theta: f.block("meta/best_theta").map(|t| t.data[..].try_into().expect("8 values")),
        };
        info!("resuming {} at epoch {}", dir.display(), state.epoch);
    } else if resume {
        warn!("no {} in {}; starting fresh", LAST_CHECKPOINT, dir.display());
    }
    fs::write(dir.join(METRICS_FILE), output::metrics_csv(&history))?;
    let mut theta_text = format!("{}\n", output::THETA_MEAN_HEADER);
    for (e, m) in &theta_means {
        theta_text.push_str(&output::theta_mean_line(*e, m));
        theta_text.push('\n');
    }
    fs::write(dir.join(THETA_MEAN_FILE), theta_text)?;

    let hist_components: Vec<usize> = match &aug {
        Some(a) => (0..THETA_DIM).filter(|&i| a.spec().enabled_ops.mask()[i]).collect(),
        None => Vec::new(),
    };
    let val_rotation = cfg.pose_shift().val_rotation();
    let test_refs: Vec<&PointCloud<T>> = data.test.iter().collect();
    let problem = CloudProblem {
        classifier: &clf,
        augmentor: aug.as_ref(),
    };

    for epoch in state.epoch..cfg.epochs {
        let split = dataset::resplit(data.pool.len(), cfg.seed, epoch);
        let train_set = split.train_clouds(&data.pool);
        let val_set = split.val_clouds(&data.pool, val_rotation);
        let train_batches: Vec<&[PointCloud<T>]> = train_set.chunks(cfg.batch_size).collect();
        let val_batches: Vec<&[PointCloud<T>]> = val_set.chunks(cfg.batch_size).collect();
        let mut thetas: Vec<AugParams> = Vec::new();
        let report = train_epoch(&problem, &mut state, &train_batches, &val_batches, &bc, &mut rng, |st, step| {
            if let (Some(a), Some(noise)) = (aug.as_ref(), step.noise.as_ref()) {
                thetas.extend(a.sample_values(&st.phi, noise)?.0);
            }
            Ok(())
        })?;

        let val_refs: Vec<&PointCloud<T>> = val_set.iter().collect();
        let row = EpochRow {
            epoch,
            train_loss: report.train_loss,
            val_loss: mean_ce(&clf, &state.omega, &val_refs)?,
            val_acc: clf.accuracy(&state.omega, &val_refs)?,
            test_acc: clf.accuracy(&state.omega, &test_refs)?,
            xi: bc.xi_at(epoch),
        };
        append_line(&dir.join(METRICS_FILE), &row.csv())?;
        history.push(row);
        let mean = output::theta_mean(&thetas);
        if let Some(m) = &mean {
            append_line(&dir.join(THETA_MEAN_FILE), &output::theta_mean_line(epoch, m))?;
            theta_means.push((epoch, *m));
        }
        if aug.is_some() && (epoch % cfg.hist_every.max(1) == 0 || epoch + 1 == cfg.epochs) {
            fs::write(dir.join(hist_file(epoch)), output::histogram_csv(&thetas, &hist_components))?;
        }
        info!(
            "{} epoch {epoch}: train {:.4} val {:.4} val_acc {:.3} test_acc {:.3}{}",
            dir.display(),
            row.train_loss,
            row.val_loss,
            row.val_acc,
            row.test_acc,
            mean.map_or(String::new(), |m| format!(" θ_r {:.3}", m[1]))
        );

        // accuracy ties (common on small val splits) go to the lower val loss
        let improved = row.val_acc > best.val_acc || (row.val_acc == best.val_acc && row.val_loss < best.val_loss);
        if improved {
            best = Best {
                epoch,
                val_acc: row.val_acc,
                val_loss: row.val_loss,
                test_acc: row.test_acc,
                theta: mean,
            };
        }
        let ckpt = Checkpoint {
            config_text: &config_text,
            classifier: &clf,
            augmentor: aug.as_ref(),
            state: &state,
            rng: &rng,
            history: &history,
            theta_means: &theta_means,
            best: &best,
        }
        .to_file();
        if improved {
            ckpt.save(&dir.join(BEST_CHECKPOINT))?;
        }
        ckpt.save(&last_path)?;
    }

    let summary = RunSummary {
        preset: cfg.preset.to_string(),
        augmentor: aug.as_ref().map_or_else(|| "none".to_string(), |a| a.kind().to_string()),
        ops: aug.as_ref().map_or(OpSet::EMPTY, |a| a.spec().enabled_ops).to_string(),
        epochs: cfg.epochs,
        best_epoch: best.epoch,
        best_val_acc: best.val_acc,
        test_acc_at_best: best.test_acc,
        final_test_acc: history.last().map_or(f64::NAN, |r| r.test_acc),
        theta_mean_at_best: best.theta,
        wall_seconds: started.elapsed().as_secs_f64(),
        complete: history.len() == cfg.epochs,
    };
    fs::write(dir.join(SUMMARY_FILE), summary.to_text())?;
    info!(
        "{}: best val acc {:.3} at epoch {}, test acc {:.3}",
        dir.display(),
        summary.best_val_acc,
        summary.best_epoch,
        summary.test_acc_at_best
    );
    Ok(RunOutcome { dir, summary, history })
}

/// One arm of a multi-run preset: sub-directory name and overrides.
fn arm(cfg: &ExperimentConfig, name: &str, augmentor: Option<AugmentorKind>, ops: OpSet) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.out = cfg.out.join(name);
    c.ops = match &augmentor {
        Some(AugmentorKind::Predefined(p)) => p.ops(),
        Some(_) => ops,
        None => OpSet::EMPTY,
    };
    c.augmentor = augmentor;
    c
}

/// The runs a preset expands to (transfer's phase 2 excluded).
pub fn plan(cfg: &ExperimentConfig) -> Result<Vec<ExperimentConfig>> {
    let policy = |s: &str| -> Result<Option<AugmentorKind>> { Ok(Some(AugmentorKind::Predefined(s.parse()?))) };
    let str_ops: OpSet = "S,T,R".parse()?;
    Ok(match cfg.preset {
        Preset::Standard | Preset::NonfixedPose | Preset::PoseMismatch => vec![cfg.clone()],
        Preset::Transfer => vec![ExperimentConfig {
            out: cfg.out.join("phase1"),
            ..cfg.clone()
        }],
        Preset::BaselineSweep => vec![
            arm(cfg, "none", None, OpSet::EMPTY),
            arm(cfg, "sampling_st", policy("scale+translate")?, OpSet::EMPTY),
            arm(cfg, "sampling_st_j", policy("scale+translate+jitter")?, OpSet::EMPTY),
            arm(cfg, "sampling_str", policy("scale+translate+rotate")?, OpSet::EMPTY),
            arm(cfg, "adapc_fixed", Some(AugmentorKind::Fixed), str_ops),
            arm(cfg, "adapc_uniform", Some(AugmentorKind::Uniform), str_ops),
            arm(cfg, "adapc_gaussian", Some(AugmentorKind::Gaussian), str_ops),
            arm(cfg, "adapc_neural", Some(AugmentorKind::Neural), str_ops),
        ],
        Preset::Ablation => {
            let kind = cfg.augmentor.clone().unwrap_or(AugmentorKind::Neural);
            let mut runs = vec![arm(cfg, "ops_none", None, OpSet::EMPTY)];
            for ops in ["S", "T", "R", "J", "S,T", "S,T,R", "S,T,R,J"] {
                let set: OpSet = ops.parse()?;
                runs.push(arm(cfg, &format!("ops_{}", set.to_string().replace('+', "")), Some(kind.clone()), set));
            }
            runs
        }
    })
}

/// Runs every arm of `cfg.preset` and writes the comparison table for
/// multi-run presets.
pub fn run(cfg: &ExperimentConfig, resume: bool) -> Result<Vec<RunOutcome>> {
    let mut outcomes = Vec::new();
    for arm in plan(cfg)? {
        outcomes.push(run_single(&arm, None, resume)?);
    }
    if cfg.preset == Preset::Transfer {
        let phase1 = &outcomes[0];
        let best = ParamFile::load(&phase1.dir.join(BEST_CHECKPOINT))?;
        let frozen = augmentor_from_checkpoint::<f64>(&best)?
            .ok_or_else(|| Error::Invalid("phase 1 produced no augmentor".into()))?;
        info!("transfer: freezing the augmentor from epoch {}", phase1.summary.best_epoch);
        let phase2 = ExperimentConfig {
            out: cfg.out.join("phase2"),
            subset_fraction: 1.0,
            ..cfg.clone()
        };
        outcomes.push(run_single(&phase2, Some(frozen), resume)?);
    }
    if outcomes.len() > 1 {
        let dirs: Vec<PathBuf> = outcomes.iter().map(|o| o.dir.clone()).collect();
        let table = summarize::summarize(&dirs)?;
        fs::write(cfg.out.join(SUMMARY_FILE), table.to_text())?;
        fs::write(cfg.out.join("summary.csv"), table.to_csv())?;
        fs::write(cfg.out.join(CONFIG_FILE), cfg.to_text())?;
    }
    Ok(outcomes)
}

/// Writes a synthetic pool and test set as XYZ files.
pub fn write_synthetic(cfg: &ExperimentConfig, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir)?;
    let (pool, test) = dataset::generate::<f64>(&cfg.synthetic())?;
    let shift = cfg.pose_shift();
    let pool = dataset::apply_pose_shift(&pool, shift, true, cfg.seed, 0);
    let test = dataset::apply_pose_shift(&test, shift, false, cfg.seed, 1);
    let (a, b) = (dir.join("train.xyz"), dir.join("test.xyz"));
    dataset::save_xyz(&a, &pool)?;
    dataset::save_xyz(&b, &test)?;
    Ok((a, b))
}

/// True when `dir` holds a file produced by a run.
pub fn looks_like_run(dir: &Path) -> bool {
    dir.join(CONFIG_FILE).exists() && dir.join(METRICS_FILE).exists()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(out: &Path, extra: &[(&str, &str)]) -> ExperimentConfig {
        let mut pairs: Vec<(String, String)> = [
            ("epochs", "3"),
            ("per_class", "6"),
            ("test_per_class", "3"),
            ("n_points", "32"),
            ("batch_size", "8"),
            ("hist_every", "2"),
        ]
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
        pairs.extend(extra.iter().map(|(k, v)| (k.to_string(), v.to_string())));
        pairs.push(("out".into(), out.display().to_string()));
        ExperimentConfig::resolve(&pairs).unwrap()
    }

    #[test]
    fn a_run_writes_every_artifact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path(), &[("preset", "pose_mismatch")]);
        let out = run(&cfg, false).unwrap();
        assert_eq!(out.len(), 1);
        for f in [METRICS_FILE, THETA_MEAN_FILE, CONFIG_FILE, SUMMARY_FILE, BEST_CHECKPOINT, LAST_CHECKPOINT] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        for e in [0, 2] {
            assert!(dir.path().join(hist_file(e)).exists());
        }
        assert!(!dir.path().join(hist_file(1)).exists());
        let metrics = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
        assert_eq!(metrics.lines().count(), 4);
        assert!(metrics.starts_with("epoch,train_loss,val_loss,val_acc,test_acc,xi\n"));
        assert_eq!(ExperimentConfig::read(&dir.path().join(CONFIG_FILE)).unwrap(), cfg);

        // one Θ per training cloud
        let n_train = (6 * 4) * 9 / 10;
        let hist = fs::read_to_string(dir.path().join(hist_file(0))).unwrap();
        let total: u64 = hist.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse::<u64>().unwrap()).sum();
        assert_eq!(total, n_train as u64);

        let s = &out[0].summary;
        assert!(s.complete);
        // oracle: highest val accuracy, then lowest val loss, then earliest
        let h = &out[0].history;
        let pick = (0..h.len())
            .reduce(|a, b| {
                let better = h[b].val_acc > h[a].val_acc || (h[b].val_acc == h[a].val_acc && h[b].val_loss < h[a].val_loss);
                if better {
                    b
                } else {
                    a
                }
            })
            .unwrap();
        assert_eq!(s.best_epoch, pick);
        assert_eq!(s.test_acc_at_best, h[pick].test_acc);
        assert!(s.theta_r_at_best().is_some());
    }

    #[test]
    fn identical_configs_give_identical_metrics() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        run(&tiny(a.path(), &[]), false).unwrap();
        run(&tiny(b.path(), &[]), false).unwrap();
        let read = |d: &Path| fs::read(d.join(METRICS_FILE)).unwrap();
        assert_eq!(read(a.path()), read(b.path()));
    }

    #[test]
    fn resuming_matches_an_uninterrupted_run() {
        let full = tempfile::tempdir().unwrap();
        let part = tempfile::tempdir().unwrap();
        run(&tiny(full.path(), &[("epochs", "4")]), false).unwrap();
        run(&tiny(part.path(), &[("epochs", "2")]), false).unwrap();
        assert!(matches!(run(&tiny(part.path(), &[("epochs", "4"), ("seed", "1")]), true), Err(Error::Usage(_))));
        run(&tiny(part.path(), &[("epochs", "4")]), true).unwrap();
        let read = |d: &Path| fs::read(d.join(METRICS_FILE)).unwrap();
        assert_eq!(read(full.path()), read(part.path()));
    }

    #[test]
    fn no_augmentation_and_predefined_arms_run() {
        let dir = tempfile::tempdir().unwrap();
        let none = run(&tiny(&dir.path().join("a"), &[("augmentor", "none")]), false).unwrap();
        assert_eq!(none[0].summary.augmentor, "none");
        assert!(none[0].summary.theta_mean_at_best.is_none());
        let pre = run(&tiny(&dir.path().join("b"), &[("augmentor", "predefined:rot=0.1")]), false).unwrap();
        let r = pre[0].summary.theta_r_at_best().unwrap();
        assert!(r.abs() < 0.1);
    }

    #[test]
    fn transfer_freezes_the_phase_one_augmentor() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path(), &[("preset", "transfer"), ("subset_fraction", "0.5"), ("ops", "R")]);
        let out = run(&cfg, false).unwrap();
        assert_eq!(out.len(), 2);
        let best1 = ParamFile::load(&dir.path().join("phase1").join(BEST_CHECKPOINT)).unwrap();
        let (_, phi1) = augmentor_from_checkpoint::<f64>(&best1).unwrap().unwrap();
        let last2 = ParamFile::load(&dir.path().join("phase2").join(LAST_CHECKPOINT)).unwrap();
        let (_, phi2) = augmentor_from_checkpoint::<f64>(&last2).unwrap().unwrap();
        assert_eq!(phi1.cast::<f32>(), phi2.cast::<f32>());
        assert!(dir.path().join(SUMMARY_FILE).exists());
    }

    #[test]
    fn ablation_plans_eight_runs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path(), &[("preset", "ablation")]);
        let runs = plan(&cfg).unwrap();
        let ops: Vec<String> = runs.iter().map(|r| r.ops.to_string()).collect();
        assert_eq!(ops, ["none", "S", "T", "R", "J", "S+T", "S+T+R", "S+T+R+J"]);
        assert_eq!(runs[0].augmentor, None);
        let sweep = plan(&tiny(dir.path(), &[("preset", "baseline_sweep")])).unwrap();
        assert_eq!(sweep.len(), 8);
        assert_eq!(sweep[3].ops.to_string(), "S+T+R");
    }

    #[test]
    fn rng_state_round_trips() {
        use rand::Rng;
        let mut rng = seeds::rng(3, Purpose::Training, 0);
        let _: [u64; 5] = rng.gen();
        let mut back = rng_from_words(&rng_words(&rng)).unwrap();
        assert_eq!(rng.gen::<u64>(), back.gen::<u64>());
    }

    #[test]
    fn pose_shift_is_applied_to_test_only_for_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let aligned = prepare_data::<f64>(&tiny(dir.path(), &[])).unwrap();
        let mism = prepare_data::<f64>(&tiny(dir.path(), &[("preset", "pose_mismatch")])).unwrap();
        assert_eq!(aligned.pool, mism.pool);
        assert_eq!(mism.test[0], aligned.test[0].rotated_y(0.7));
    }
}
