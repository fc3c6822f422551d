//! Experiment driver: configuration, presets, emitted files and run
//! comparison.

pub mod config;
pub mod output;
pub mod run;
pub mod summarize;

pub use config::{ExperimentConfig, PoseMode, Precision, Preset};
pub use output::{EpochRow, RunSummary};
pub use run::{run, run_single, RunOutcome};
pub use summarize::{summarize, SummaryTable};
