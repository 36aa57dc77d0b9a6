//! Metrics CSV (`phase,epoch,loss,top1,wall_time_s,pair_count,k_size`) and
//! the mining report CSV used by the K ablation.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const METRICS_HEADER: [&str; 7] = [
    "phase",
    "epoch",
    "loss",
    "top1",
    "wall_time_s",
    "pair_count",
    "k_size",
];

pub const MINING_HEADER: [&str; 4] = ["k", "pair_count", "wall_time_s", "sim_evals"];

/// One row of the metrics CSV. Empty cells are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub phase: String,
    pub epoch: usize,
    pub loss: Option<f64>,
    pub top1: Option<f64>,
    pub wall_time_s: Option<f64>,
    pub pair_count: Option<usize>,
    pub k_size: Option<usize>,
}

impl MetricsRecord {
    pub fn new(phase: &str, epoch: usize) -> Self {
        Self {
            phase: phase.to_string(),
            epoch,
            loss: None,
            top1: None,
            wall_time_s: None,
            pair_count: None,
            k_size: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiningRow {
    pub k: usize,
    pub pair_count: usize,
    pub wall_time_s: f64,
    pub sim_evals: u64,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let offset = e.position().map_or(0, |p| p.byte());
    Error::format(path, offset, e.to_string())
}

fn write_rows<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path, header: &[&str]) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let found = r.headers().map_err(|e| csv_err(path, e))?.clone();
    if found.iter().ne(header.iter().copied()) {
        return Err(Error::format(
            path,
            0,
            format!("header `{}`, expected `{}`", found.iter().collect::<Vec<_>>().join(","), header.join(",")),
        ));
    }
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

pub fn write_metrics(path: &Path, rows: &[MetricsRecord]) -> Result<()> {
    write_rows(path, &METRICS_HEADER, rows)
}

/// Reads a metrics CSV, rejecting files whose header differs from the schema.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    read_rows(path, &METRICS_HEADER)
}

pub fn write_mining_report(path: &Path, rows: &[MiningRow]) -> Result<()> {
    write_rows(path, &MINING_HEADER, rows)
}

pub fn read_mining_report(path: &Path) -> Result<Vec<MiningRow>> {
    read_rows(path, &MINING_HEADER)
}

/// Stage durations, kept apart from the metrics so those stay reproducible.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub stage: String,
    pub wall_time_s: f64,
}

pub fn write_timing(path: &Path, rows: &[TimingRow]) -> Result<()> {
    write_rows(path, &["stage", "wall_time_s"], rows)
}
