//! Files a run leaves behind: metrics, Θ histograms and means, summaries.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::transform::{AugParams, THETA_DIM};

pub const METRICS_HEADER: &str = "epoch,train_loss,val_loss,val_acc,test_acc,xi";
pub const THETA_MEAN_HEADER: &str = "epoch,jitter,rotation,scale_x,scale_y,scale_z,translate_x,translate_y,translate_z";
pub const HIST_BINS: usize = 60;

pub const COMPONENT_NAMES: [&str; THETA_DIM] = [
    "jitter",
    "rotation",
    "scale_x",
    "scale_y",
    "scale_z",
    "translate_x",
    "translate_y",
    "translate_z",
];

/// Fixed histogram range of each Θ component.
pub const COMPONENT_RANGES: [(f64, f64); THETA_DIM] = [
    (-0.5, 0.5),
    (-PI, PI),
    (0.0, 2.0),
    (0.0, 2.0),
    (0.0, 2.0),
    (-1.0, 1.0),
    (-1.0, 1.0),
    (-1.0, 1.0),
];

/// One line of `metrics.csv`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub test_acc: f64,
    pub xi: f64,
}

impl EpochRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.train_loss, self.val_loss, self.val_acc, self.test_acc, self.xi
        )
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.epoch as f64, self.train_loss, self.val_loss, self.val_acc, self.test_acc, self.xi]
    }

    pub fn from_array(a: &[f64]) -> Self {
        EpochRow {
            epoch: a[0] as usize,
            train_loss: a[1],
            val_loss: a[2],
            val_acc: a[3],
            test_acc: a[4],
            xi: a[5],
        }
    }
}

pub fn metrics_csv(rows: &[EpochRow]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        s.push_str(&r.csv());
        s.push('\n');
    }
    s
}

/// Parses a `metrics.csv` written by [`metrics_csv`].
pub fn read_metrics(path: &Path) -> Result<Vec<EpochRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let vals: std::result::Result<Vec<f64>, _> = line.split(',').map(str::parse::<f64>).collect();
        match vals {
            Ok(v) if v.len() == 6 => rows.push(EpochRow::from_array(&v)),
            _ => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: "expected six numeric fields".into(),
                })
            }
        }
    }
    Ok(rows)
}

/// Per-component mean of `thetas`, or `None` when empty.
pub fn theta_mean(thetas: &[AugParams]) -> Option<[f64; THETA_DIM]> {
    if thetas.is_empty() {
        return None;
    }
    let mut m = [0.0; THETA_DIM];
    for t in thetas {
        for (acc, x) in m.iter_mut().zip(t.0) {
            *acc += x;
        }
    }
    Some(m.map(|x| x / thetas.len() as f64))
}

pub fn theta_mean_line(epoch: usize, mean: &[f64; THETA_DIM]) -> String {
    let mut s = epoch.to_string();
    for x in mean {
        let _ = write!(s, ",{x}");
    }
    s
}

/// Histogram of one component: `HIST_BINS` equal bins over its range,
/// out-of-range values counted in the edge bins.
pub fn histogram(values: impl Iterator<Item = f64>, range: (f64, f64)) -> Vec<u64> {
    let (lo, hi) = range;
    let width = (hi - lo) / HIST_BINS as f64;
    let mut counts = vec![0u64; HIST_BINS];
    for v in values {
        let bin = if v.is_nan() {
            0
        } else {
            (((v - lo) / width).floor().max(0.0) as usize).min(HIST_BINS - 1)
        };
        counts[bin] += 1;
    }
    counts
}

/// `component,bin_left,bin_right,count` rows for the given components.
pub fn histogram_csv(thetas: &[AugParams], components: &[usize]) -> String {
    let mut s = String::from("component,bin_left,bin_right,count\n");
    for &c in components {
        let range = COMPONENT_RANGES[c];
        let width = (range.1 - range.0) / HIST_BINS as f64;
        let counts = histogram(thetas.iter().map(|t| t.0[c]), range);
        for (b, n) in counts.iter().enumerate() {
            let left = range.0 + b as f64 * width;
            let _ = writeln!(s, "{},{},{},{}", COMPONENT_NAMES[c], left, left + width, n);
        }
    }
    s
}

/// Final state of one run as written to `summary.txt`.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub preset: String,
    pub augmentor: String,
    pub ops: String,
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub test_acc_at_best: f64,
    pub final_test_acc: f64,
    /// Mean sampled Θ during the best epoch, when an augmentor ran.
    pub theta_mean_at_best: Option<[f64; THETA_DIM]>,
    pub wall_seconds: f64,
    pub complete: bool,
}

impl RunSummary {
    pub fn theta_r_at_best(&self) -> Option<f64> {
        self.theta_mean_at_best.map(|m| m[crate::transform::slots::ROTATION])
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "preset = {}", self.preset);
        let _ = writeln!(s, "augmentor = {}", self.augmentor);
        let _ = writeln!(s, "ops = {}", self.ops);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "best_epoch = {}", self.best_epoch);
        let _ = writeln!(s, "best_val_acc = {}", self.best_val_acc);
        let _ = writeln!(s, "test_acc_at_best = {}", self.test_acc_at_best);
        let _ = writeln!(s, "final_test_acc = {}", self.final_test_acc);
        if let Some(m) = &self.theta_mean_at_best {
            let parts: Vec<String> = m.iter().map(f64::to_string).collect();
            let _ = writeln!(s, "theta_mean_at_best = {}", parts.join(" "));
        }
        let _ = writeln!(s, "wall_seconds = {:.1}", self.wall_seconds);
        let _ = writeln!(s, "status = {}", if self.complete { "complete" } else { "incomplete" });
        s
    }

    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        let mut s = RunSummary {
            preset: String::new(),
            augmentor: String::new(),
            ops: String::new(),
            epochs: 0,
            best_epoch: 0,
            best_val_acc: f64::NAN,
            test_acc_at_best: f64::NAN,
            final_test_acc: f64::NAN,
            theta_mean_at_best: None,
            wall_seconds: f64::NAN,
            complete: false,
        };
        for (i, line) in text.lines().enumerate() {
            let err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            };
            let Some((k, v)) = line.split_once('=') else {
                continue;
            };
            let (k, v) = (k.trim(), v.trim());
            let num = |v: &str| v.parse::<f64>().map_err(|_| err(format!("bad number `{v}` for `{k}`")));
            match k {
                "preset" => s.preset = v.into(),
                "augmentor" => s.augmentor = v.into(),
                "ops" => s.ops = v.into(),
                "epochs" => s.epochs = num(v)? as usize,
                "best_epoch" => s.best_epoch = num(v)? as usize,
                "best_val_acc" => s.best_val_acc = num(v)?,
                "test_acc_at_best" => s.test_acc_at_best = num(v)?,
                "final_test_acc" => s.final_test_acc = num(v)?,
                "theta_mean_at_best" => {
                    let vals = v.split_whitespace().map(num).collect::<Result<Vec<f64>>>()?;
                    let arr: [f64; THETA_DIM] = vals.try_into().map_err(|_| err("expected 8 values".into()))?;
                    s.theta_mean_at_best = Some(arr);
                }
                "wall_seconds" => s.wall_seconds = num(v)?,
                "status" => s.complete = v == "complete",
                _ => {}
            }
        }
        Ok(s)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(path, &text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_counts_every_sample() {
        let vals = [-10.0, -PI, 0.0, 0.05, PI - 1e-9, PI, 7.0];
        let h = histogram(vals.iter().copied(), (-PI, PI));
        assert_eq!(h.len(), 60);
        assert_eq!(h.iter().sum::<u64>(), vals.len() as u64);
        assert_eq!(h[0], 2);
        assert_eq!(h[59], 3);
        assert_eq!(h[30], 2);
    }

    #[test]
    fn histogram_csv_rows_cover_the_range() {
        let thetas = vec![AugParams::IDENTITY; 7];
        let csv = histogram_csv(&thetas, &[1]);
        let rows: Vec<&str> = csv.lines().skip(1).collect();
        assert_eq!(rows.len(), 60);
        assert!(rows[0].starts_with(&format!("rotation,{}", -PI)));
        let total: u64 = rows.iter().map(|r| r.rsplit(',').next().unwrap().parse::<u64>().unwrap()).sum();
        assert_eq!(total, 7);
    }

    #[test]
    fn theta_mean_of_identity_draws() {
        assert_eq!(theta_mean(&[]), None);
        let m = theta_mean(&[AugParams::IDENTITY, AugParams::IDENTITY]).unwrap();
        assert_eq!(m, AugParams::IDENTITY.0);
        assert_eq!(theta_mean_line(3, &m), "3,0,0,1,1,1,0,0,0");
    }

    #[test]
    fn summary_round_trips() {
        let s = RunSummary {
            preset: "pose_mismatch".into(),
            augmentor: "neural".into(),
            ops: "R".into(),
            epochs: 10,
            best_epoch: 4,
            best_val_acc: 0.975,
            test_acc_at_best: 0.93,
            final_test_acc: 0.92,
            theta_mean_at_best: Some([0.0, 0.7, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0]),
            wall_seconds: 12.5,
            complete: true,
        };
        let back = RunSummary::parse(Path::new("s"), &s.to_text()).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.theta_r_at_best(), Some(0.7));
    }

    #[test]
    fn metrics_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![
            EpochRow {
                epoch: 0,
                train_loss: 1.25,
                val_loss: 1.0 / 3.0,
                val_acc: 0.5,
                test_acc: 0.25,
                xi: 0.001,
            };
            3
        ];
        let p = dir.path().join("m.csv");
        std::fs::write(&p, metrics_csv(&rows)).unwrap();
        assert_eq!(read_metrics(&p).unwrap(), rows);
    }
}
