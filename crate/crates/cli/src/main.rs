use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use pcaug_core::harness::config::read_pairs;
use pcaug_core::harness::{self, ExperimentConfig};
use pcaug_core::Error;

/// Learned point-cloud augmentation through bilevel optimization.
#[derive(Parser)]
#[command(name = "pcaug", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one preset and write metrics, histograms and checkpoints.
    Run(RunArgs),
    /// Compare finished runs as a text table (and optional CSV).
    Summarize {
        /// Run directories, or preset directories holding several runs.
        dirs: Vec<PathBuf>,
        /// Also write the table as CSV here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Write the synthetic training pool and test set as XYZ files.
    Generate(GenerateArgs),
}

#[derive(Args)]
struct RunArgs {
    /// `key = value` file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// standard, nonfixed_pose, pose_mismatch, transfer, baseline_sweep or ablation.
    #[arg(long)]
    preset: Option<String>,
    /// none, fixed, uniform, gaussian, neural or predefined:<policy>.
    #[arg(long)]
    augmentor: Option<String>,
    /// Subset of S,T,R,J.
    #[arg(long)]
    ops: Option<String>,
    #[arg(long)]
    lambda: Option<String>,
    /// Classifier learning rate.
    #[arg(long)]
    lr: Option<String>,
    /// Augmentor learning rate.
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    /// Rotation of validation and test clouds about y, in radians.
    #[arg(long, allow_hyphen_values = true)]
    theta_star: Option<String>,
    #[arg(long)]
    subset_fraction: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    out: Option<String>,
    /// An XYZ-label file, or `synthetic`.
    #[arg(long)]
    data: Option<String>,
    /// 32 or 64.
    #[arg(long)]
    precision: Option<String>,
    /// Any other config key, as key=value; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Continue from checkpoint_last.bin in the output directory.
    #[arg(long)]
    resume: bool,
}

impl RunArgs {
    fn overrides(&self) -> anyhow::Result<Vec<(String, String)>> {
        let mut pairs = match &self.config {
            Some(path) => read_pairs(path)?,
            None => Vec::new(),
        };
        let flags = [
            ("preset", &self.preset),
            ("augmentor", &self.augmentor),
            ("ops", &self.ops),
            ("lambda", &self.lambda),
            ("lr", &self.lr),
            ("alpha", &self.alpha),
            ("epochs", &self.epochs),
            ("batch_size", &self.batch_size),
            ("theta_star", &self.theta_star),
            ("subset_fraction", &self.subset_fraction),
            ("seed", &self.seed),
            ("out", &self.out),
            ("data", &self.data),
            ("precision", &self.precision),
        ];
        for item in &self.set {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("--set expects key=value, got `{item}`")))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        for (k, v) in flags {
            if let Some(v) = v {
                pairs.push((k.to_string(), v.clone()));
            }
        }
        Ok(pairs)
    }
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 100)]
    per_class: usize,
    #[arg(long, default_value_t = 25)]
    test_per_class: usize,
    #[arg(long, default_value_t = 128)]
    n_points: usize,
    /// Rotate the test set about y by this angle.
    #[arg(long, allow_hyphen_values = true)]
    theta_star: Option<f64>,
}

fn run(args: RunArgs) -> anyhow::Result<()> {
    let cfg = ExperimentConfig::resolve(&args.overrides()?)?;
    let outcomes = harness::run(&cfg, args.resume)?;
    for o in &outcomes {
        let s = &o.summary;
        let theta = s.theta_r_at_best().map_or(String::new(), |t| format!(" theta_r_mean={t:.4}"));
        println!(
            "{}: preset={} augmentor={} ops={} best_epoch={} best_val_acc={:.4} test_acc={:.4}{theta}",
            o.dir.display(),
            s.preset,
            s.augmentor,
            s.ops,
            s.best_epoch,
            s.best_val_acc,
            s.test_acc_at_best
        );
    }
    Ok(())
}

fn summarize(dirs: Vec<PathBuf>, csv: Option<PathBuf>) -> anyhow::Result<()> {
    let table = harness::summarize(&dirs)?;
    print!("{}", table.to_text());
    if let Some(path) = csv {
        std::fs::write(&path, table.to_csv()).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn generate(args: GenerateArgs) -> anyhow::Result<()> {
    let mut pairs = vec![
        ("seed".to_string(), args.seed.to_string()),
        ("classes".to_string(), args.classes.to_string()),
        ("per_class".to_string(), args.per_class.to_string()),
        ("test_per_class".to_string(), args.test_per_class.to_string()),
        ("n_points".to_string(), args.n_points.to_string()),
        ("augmentor".to_string(), "none".to_string()),
    ];
    if let Some(t) = args.theta_star {
        pairs.push(("theta_star".to_string(), t.to_string()));
    }
    let cfg = ExperimentConfig::resolve(&pairs)?;
    let (train, test) = harness::run::write_synthetic(&cfg, &args.out)?;
    println!("{}\n{}", train.display(), test.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run(args),
        Command::Summarize { dirs, csv } => summarize(dirs, csv),
        Command::Generate(args) => generate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if matches!(e.downcast_ref::<Error>(), Some(Error::Usage(_))) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
