//! Result files: JSON reports, CSV tables, streamed metrics.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::training::EvalRecord;

/// How fractional budgets become entry counts; written into every table
/// that has a `k` column.
pub const K_ROUNDING: &str = "k = round_half_to_even(fraction * |B|)";

pub(crate) fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Writes `rows` as CSV, optionally preceded by `# comment` lines.
pub(crate) fn write_csv<T: Serialize>(path: &Path, comments: &[&str], rows: &[T]) -> Result<()> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for c in comments {
        writeln!(out, "# {c}").map_err(|e| Error::io(path, e))?;
    }
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `metrics.csv` of one run, flushed after every record so a run that is
/// killed part way still leaves its curve behind.
pub(crate) struct MetricsWriter {
    inner: csv::Writer<File>,
    path: std::path::PathBuf,
}

impl MetricsWriter {
    pub(crate) fn create(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent() {
            ensure_dir(parent)?;
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut inner = csv::Writer::from_writer(file);
        inner.write_record(["step", "train_loss", "relative_mse"])?;
        inner.flush().map_err(|e| Error::io(path, e))?;
        Ok(Self {
            inner,
            path: path.to_path_buf(),
        })
    }

    pub(crate) fn push(&mut self, r: &EvalRecord) -> Result<()> {
        self.inner.serialize((r.step, r.train_loss, r.relative_mse))?;
        self.inner.flush().map_err(|e| Error::io(&self.path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
struct HistogramBin {
    log10_lo: f64,
    log10_hi: f64,
    count: usize,
}

/// Histogram of `log10(score)` in unit-width bins. Zero scores are counted
/// in a first row with both edges set to `-inf`.
pub(crate) fn write_score_histogram(path: &Path, scores: &Matrix) -> Result<()> {
    let logs: Vec<f64> = scores.as_slice().iter().filter(|&&v| v > 0.0).map(|v| v.log10()).collect();
    let zeros = scores.len() - logs.len();
    let mut bins = vec![HistogramBin {
        log10_lo: f64::NEG_INFINITY,
        log10_hi: f64::NEG_INFINITY,
        count: zeros,
    }];
    if !logs.is_empty() {
        let lo = logs.iter().copied().fold(f64::INFINITY, f64::min).floor() as i64;
        let hi = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max).floor() as i64;
        for b in lo..=hi {
            let count = logs.iter().filter(|&&l| l.floor() as i64 == b).count();
            bins.push(HistogramBin {
                log10_lo: b as f64,
                log10_hi: (b + 1) as f64,
                count,
            });
        }
    }
    write_csv(path, &[], &bins)
}

/// One cell of a budget sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: String,
    pub fraction: f64,
    pub k: usize,
    /// Replicate index.
    pub seed: usize,
    /// `NaN` when the cell did not finish.
    pub relative_mse: f64,
    /// `ok`, `diverged@<step>`, or `invalid: <reason>`.
    pub status: String,
}

impl SweepRow {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

/// Seed statistics of one `(method, k)` group; failed cells are excluded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: String,
    pub fraction: f64,
    pub k: usize,
    pub n: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub schema_version: u32,
    pub experiment: String,
    pub task: String,
    pub regime: String,
    pub k_rounding: String,
    pub rows: Vec<SweepRow>,
    pub aggregate: Vec<AggregateRow>,
}

impl SweepTable {
    pub fn new(experiment: &str, task: &str, regime: &str, rows: Vec<SweepRow>) -> Self {
        let aggregate = aggregate(&rows);
        Self {
            schema_version: crate::SCHEMA_VERSION,
            experiment: experiment.into(),
            task: task.into(),
            regime: regime.into(),
            k_rounding: K_ROUNDING.into(),
            rows,
            aggregate,
        }
    }

    /// Seed-mean relative MSE of `method` at `k`, if any cell finished.
    pub fn mean(&self, method: &str, k: usize) -> Option<f64> {
        self.aggregate
            .iter()
            .find(|a| a.method == method && a.k == k && a.n > 0)
            .map(|a| a.mean)
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        read_json(path)
    }

    /// `sweep.csv`, `aggregate.csv` and `sweep.json` in `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_csv(&dir.join("sweep.csv"), &[K_ROUNDING], &self.rows)?;
        write_csv(&dir.join("aggregate.csv"), &[K_ROUNDING], &self.aggregate)?;
        write_json(&dir.join("sweep.json"), self)
    }
}

fn aggregate(rows: &[SweepRow]) -> Vec<AggregateRow> {
    let mut groups: Vec<AggregateRow> = Vec::new();
    for r in rows {
        let idx = match groups.iter().position(|g| g.method == r.method && g.k == r.k) {
            Some(i) => i,
            None => {
                groups.push(AggregateRow {
                    method: r.method.clone(),
                    fraction: r.fraction,
                    k: r.k,
                    n: 0,
                    mean: 0.0,
                    min: f64::INFINITY,
                    max: f64::NEG_INFINITY,
                    failed: 0,
                });
                groups.len() - 1
            }
        };
        let g = &mut groups[idx];
        if r.is_ok() {
            g.n += 1;
            g.mean += r.relative_mse;
            g.min = g.min.min(r.relative_mse);
            g.max = g.max.max(r.relative_mse);
        } else {
            g.failed += 1;
        }
    }
    for g in &mut groups {
        if g.n > 0 {
            g.mean /= g.n as f64;
        } else {
            g.mean = f64::NAN;
            g.min = f64::NAN;
            g.max = f64::NAN;
        }
    }
    groups
}
