//! Comparison tables over finished (or unfinished) run directories.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::config::ExperimentConfig;
use super::output::RunSummary;
use super::run::{looks_like_run, CONFIG_FILE, SUMMARY_FILE};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub dir: PathBuf,
    pub preset: String,
    pub augmentor: String,
    pub ops: String,
    pub best_val_acc: f64,
    pub test_acc_at_best: f64,
    pub wall_seconds: f64,
    /// `complete`, `incomplete` or `missing summary`.
    pub status: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SummaryTable {
    pub rows: Vec<SummaryRow>,
}

fn row_for(dir: &Path) -> SummaryRow {
    let summary = dir.join(SUMMARY_FILE);
    match RunSummary::read(&summary) {
        Ok(s) if !s.preset.is_empty() => SummaryRow {
            dir: dir.to_path_buf(),
            preset: s.preset,
            augmentor: s.augmentor,
            ops: s.ops,
            best_val_acc: s.best_val_acc,
            test_acc_at_best: s.test_acc_at_best,
            wall_seconds: s.wall_seconds,
            status: if s.complete { "complete" } else { "incomplete" }.into(),
        },
        _ => {
            let cfg = ExperimentConfig::read(&dir.join(CONFIG_FILE)).ok();
            SummaryRow {
                dir: dir.to_path_buf(),
                preset: cfg.as_ref().map_or_else(|| "?".into(), |c| c.preset.to_string()),
                augmentor: cfg
                    .as_ref()
                    .and_then(|c| c.augmentor.as_ref().map(ToString::to_string))
                    .unwrap_or_else(|| "none".into()),
                ops: cfg.as_ref().map_or_else(|| "?".into(), |c| c.ops.to_string()),
                best_val_acc: f64::NAN,
                test_acc_at_best: f64::NAN,
                wall_seconds: f64::NAN,
                status: "missing summary".into(),
            }
        }
    }
}

/// Run directories under `dir`: itself when it is a run, else its
/// immediate sub-directories that are runs, in name order.
fn expand(dir: &Path) -> Result<Vec<PathBuf>> {
    if looks_like_run(dir) || !dir.is_dir() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut subs: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.join(CONFIG_FILE).exists())
        .collect();
    subs.sort();
    if subs.is_empty() {
        return Ok(vec![dir.to_path_buf()]);
    }
    Ok(subs)
}

/// One row per run, grouped by preset (stable within a preset). A missing
/// or partial run gives a flagged row rather than an error.
pub fn summarize(dirs: &[PathBuf]) -> Result<SummaryTable> {
    let mut rows = Vec::new();
    for d in dirs {
        for run in expand(d)? {
            rows.push(row_for(&run));
        }
    }
    let mut order: Vec<String> = Vec::new();
    for r in &rows {
        if !order.contains(&r.preset) {
            order.push(r.preset.clone());
        }
    }
    rows.sort_by_key(|r| order.iter().position(|p| *p == r.preset));
    Ok(SummaryTable { rows })
}

fn pct(x: f64) -> String {
    if x.is_finite() {
        format!("{:.2}", 100.0 * x)
    } else {
        "-".into()
    }
}

impl SummaryTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("preset,augmentor,ops,best_val_acc,test_acc_at_best,wall_seconds,status,dir\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.preset,
                r.augmentor,
                r.ops,
                r.best_val_acc,
                r.test_acc_at_best,
                r.wall_seconds,
                r.status,
                r.dir.display()
            );
        }
        s
    }

    /// Aligned text table, accuracies in percent, a blank line between presets.
    pub fn to_text(&self) -> String {
        let header = ["preset", "augmentor", "ops", "best val %", "test % @best", "wall s", "status", "dir"];
        let cells: Vec<[String; 8]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.preset.clone(),
                    r.augmentor.clone(),
                    r.ops.clone(),
                    pct(r.best_val_acc),
                    pct(r.test_acc_at_best),
                    if r.wall_seconds.is_finite() {
                        format!("{:.1}", r.wall_seconds)
                    } else {
                        "-".into()
                    },
                    r.status.clone(),
                    r.dir.display().to_string(),
                ]
            })
            .collect();
        let mut width = header.map(str::len);
        for c in &cells {
            for (w, x) in width.iter_mut().zip(c) {
                *w = (*w).max(x.chars().count());
            }
        }
        let line = |c: &[String]| {
            let parts: Vec<String> = c.iter().zip(width).map(|(x, w)| format!("{x:<w$}")).collect();
            parts.join("  ").trim_end().to_string()
        };
        let mut s = line(&header.map(String::from));
        s.push('\n');
        let mut prev: Option<&str> = None;
        for (c, r) in cells.iter().zip(&self.rows) {
            if prev.is_some_and(|p| p != r.preset) {
                s.push('\n');
            }
            prev = Some(&r.preset);
            s.push_str(&line(c));
            s.push('\n');
        }
        s
    }
}
