//! On-disk report formats shared by `eval` and `analyze`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use trajrefine::metrics::{ScoreDistribution, Summary, HISTOGRAM_BINS};
use trajrefine::model::ModelConfig;
use trajrefine::quality::InferenceConfig;

use crate::config::EvalMode;
use crate::error::{CliError, Result};

pub const SUMMARY_FILE: &str = "summary.json";
pub const SCENARIOS_FILE: &str = "scenarios.csv";
pub const HISTOGRAM_FILE: &str = "histogram.csv";
pub const METRICS_FILE: &str = "metrics.csv";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Migration {
    pub initially_low: usize,
    pub low_improved: f64,
    pub initially_high: usize,
    pub high_worsened: f64,
}

impl From<&ScoreDistribution> for Migration {
    fn from(d: &ScoreDistribution) -> Self {
        Migration {
            initially_low: d.initially_low,
            low_improved: d.low_improved,
            initially_high: d.initially_high,
            high_worsened: d.high_worsened,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub mode: EvalMode,
    pub checkpoint: String,
    pub dataset: String,
    pub scenarios: usize,
    pub model: ModelConfig,
    /// Length of the fixed sweep behind `per_iteration` and the labels.
    pub sweep_iterations: usize,
    pub inference: Option<InferenceConfig>,
    /// Metrics after each iteration of the fixed sweep.
    pub per_iteration: Vec<Summary>,
    /// Headline metrics: the last sweep iteration, or the adaptive run.
    pub result: Summary,
    pub mean_iterations: f64,
    /// Adaptive exits by kind.
    pub exits: BTreeMap<String, usize>,
    /// Fraction of scenarios with label >= 0.8 per iteration.
    pub high_fraction: Vec<f64>,
    pub migration: Migration,
}

/// One row of the per-scenario CSV. List columns are `;`-separated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRow {
    pub id: String,
    pub iterations: usize,
    pub exit: String,
    pub min_ade: f64,
    pub min_fde: f64,
    pub mode_fde: String,
    pub scores: String,
    /// Quality labels of the fixed sweep.
    pub labels: String,
    pub min_fde_trace: String,
}

pub fn join(values: &[f64]) -> String {
    values.iter().map(f64::to_string).collect::<Vec<_>>().join(";")
}

pub fn split(field: &str) -> std::result::Result<Vec<f64>, std::num::ParseFloatError> {
    if field.is_empty() {
        return Ok(Vec::new());
    }
    field.split(';').map(str::parse).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub iteration: usize,
    pub bin: usize,
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
}

pub fn histogram_rows(d: &ScoreDistribution) -> Vec<HistogramRow> {
    let width = 1.0 / HISTOGRAM_BINS as f64;
    d.histograms
        .iter()
        .enumerate()
        .flat_map(|(iteration, h)| {
            h.iter().enumerate().map(move |(bin, count)| HistogramRow {
                iteration,
                bin,
                lower: bin as f64 * width,
                upper: (bin + 1) as f64 * width,
                count: *count,
            })
        })
        .collect()
}

/// Writes `bytes` next to `path` and renames it into place, so readers
/// never observe a half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

pub fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner()
        .map_err(|e| CliError::Usage(format!("csv buffer: {e}")))
}

pub fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(value)?;
    out.push(b'\n');
    Ok(out)
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::report(path, e.to_string()))?;
    r.deserialize()
        .map(|row| row.map_err(|e| CliError::report(path, e.to_string())))
        .collect()
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::report(path, e.to_string()))
}
