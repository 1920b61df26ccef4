//! Run-directory files: metrics table, point sets, audit log, report.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::AuditRecord;

/// One row of `metrics.csv`; empty cells are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u32,
    pub n_points: u64,
    pub n_masks: u64,
    pub budget_seconds: f64,
    pub train_iters_cum: u64,
    pub test_mean_iou: f64,
    pub test_map: f64,
    pub ap_small: Option<f64>,
    pub ap_medium: Option<f64>,
    pub ap_large: Option<f64>,
    pub point_acc: Option<f64>,
    pub new_point_misclass_ratio: Option<f64>,
    pub mean_boundary_dist: Option<f64>,
}

pub const METRICS_COLUMNS: [&str; 13] = [
    "step",
    "n_points",
    "n_masks",
    "budget_seconds",
    "train_iters_cum",
    "test_mean_iou",
    "test_map",
    "ap_small",
    "ap_medium",
    "ap_large",
    "point_acc",
    "new_point_misclass_ratio",
    "mean_boundary_dist",
];

pub fn metrics_to_csv(rows: &[MetricsRow]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(METRICS_COLUMNS)?;
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidValue(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn metrics_from_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
    if header != METRICS_COLUMNS {
        return Err(Error::InvalidValue(format!("unexpected metrics header {header:?}")));
    }
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// File layout of one run.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn create(&self) -> Result<()> {
        fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn points(&self, step: u32) -> PathBuf {
        self.root.join(format!("points_step_{step}.json"))
    }

    pub fn oracle_log(&self) -> PathBuf {
        self.root.join("oracle_log.jsonl")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }

    pub fn eval_dump(&self, step: u32) -> PathBuf {
        self.root.join(format!("eval_step_{step}.json"))
    }

    pub fn write(&self, path: &Path, text: &str) -> Result<()> {
        // write then rename so a crash never leaves a half-written artifact
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(&self, path: &Path) -> Result<String> {
        fs::read_to_string(path).map_err(|e| Error::io(path, e))
    }
}

pub fn oracle_log_text(records: &[AuditRecord]) -> String {
    records.iter().map(AuditRecord::to_json_line).collect()
}

pub fn parse_oracle_log(text: &str) -> Result<Vec<AuditRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Per-step AFIS bookkeeping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AfisStepRecord {
    pub step: u32,
    pub masks: usize,
    pub images: usize,
    pub mean_instances_per_image: Option<f64>,
}

/// Summary written to `report.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub strategy: String,
    pub mode: String,
    pub seed: u64,
    pub oracle_assisted: bool,
    pub transfer_from: Option<PathBuf>,
    pub steps_completed: u32,
    pub steps_planned: u32,
    pub finished: bool,
    pub skipped_instances: Vec<String>,
    pub afis: Vec<AfisStepRecord>,
    pub error: Option<String>,
    pub metrics: Vec<MetricsRow>,
}
