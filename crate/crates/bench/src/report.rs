//! CSV output.
//!
//! `PREFIX.summary.csv` holds one row per run with the columns of
//! [`SummaryRow`]. `PREFIX.retrains.csv` holds one row per published
//! training job: `start_ms,duration_ms,total_keys,delta_keys,model_id,train_ms`.
//! `train_ms` is the part of `duration_ms` spent building rows, factorizing
//! and solving.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{BenchError, Result};
use crate::runner::{RetrainRow, RunReport};
use crate::scaling::ScalingPoint;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub target: String,
    pub backend: String,
    pub workload: String,
    pub distribution: String,
    pub threads: usize,
    pub initial_keys: usize,
    pub key_len: usize,
    pub ops: u64,
    pub elapsed_s: f64,
    pub throughput_ops_s: f64,
    pub traverse_mean_ns: f64,
    pub traverse_p99_ns: f64,
    pub ml_inference_mean_ns: f64,
    pub ml_inference_p99_ns: f64,
    pub local_search_mean_ns: f64,
    pub local_search_p99_ns: f64,
    pub buffer_search_mean_ns: f64,
    pub buffer_search_p99_ns: f64,
    pub range_scan_mean_ns: f64,
    pub range_scan_p99_ns: f64,
    pub buffer_insert_mean_ns: f64,
    pub buffer_insert_p99_ns: f64,
    pub memory_model_bytes: usize,
    pub memory_memo_bytes: usize,
    pub memory_buffer_bytes: usize,
    pub memory_structure_bytes: usize,
    pub memory_total_bytes: usize,
    pub retrains: usize,
    pub read_hits: u64,
    pub reads: u64,
}

impl From<&RunReport> for SummaryRow {
    fn from(r: &RunReport) -> Self {
        let lat = |name: &str| r.category(name).map_or((0.0, 0.0), |c| (c.mean_ns, c.p99_ns));
        let (traverse_mean_ns, traverse_p99_ns) = lat("traverse");
        let (ml_inference_mean_ns, ml_inference_p99_ns) = lat("ml_inference");
        let (local_search_mean_ns, local_search_p99_ns) = lat("local_search");
        let (buffer_search_mean_ns, buffer_search_p99_ns) = lat("buffer_search");
        let (range_scan_mean_ns, range_scan_p99_ns) = lat("range_scan");
        let (buffer_insert_mean_ns, buffer_insert_p99_ns) = lat("buffer_insert");
        SummaryRow {
            target: r.target.to_string(),
            backend: r.backend.clone(),
            workload: r.workload.clone(),
            distribution: r.distribution.clone(),
            threads: r.threads,
            initial_keys: r.initial_keys,
            key_len: r.key_len,
            ops: r.ops,
            elapsed_s: r.elapsed.as_secs_f64(),
            throughput_ops_s: r.throughput,
            traverse_mean_ns,
            traverse_p99_ns,
            ml_inference_mean_ns,
            ml_inference_p99_ns,
            local_search_mean_ns,
            local_search_p99_ns,
            buffer_search_mean_ns,
            buffer_search_p99_ns,
            range_scan_mean_ns,
            range_scan_p99_ns,
            buffer_insert_mean_ns,
            buffer_insert_p99_ns,
            memory_model_bytes: r.memory.model,
            memory_memo_bytes: r.memory.memo,
            memory_buffer_bytes: r.memory.buffer,
            memory_structure_bytes: r.memory.structure,
            memory_total_bytes: r.memory.total(),
            retrains: r.retrain_log.len(),
            read_hits: r.read_hits,
            reads: r.reads,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RetrainCsv {
    start_ms: f64,
    duration_ms: f64,
    total_keys: usize,
    delta_keys: usize,
    model_id: u64,
    train_ms: f64,
}

pub fn summary_path(prefix: &Path) -> PathBuf {
    with_suffix(prefix, ".summary.csv")
}

pub fn retrain_path(prefix: &Path) -> PathBuf {
    with_suffix(prefix, ".retrains.csv")
}

pub fn scaling_path(prefix: &Path) -> PathBuf {
    with_suffix(prefix, ".scaling.csv")
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Writes the summary and retrain-log CSVs for `report` next to `prefix`.
pub fn report_csv(report: &RunReport, prefix: &Path) -> Result<(PathBuf, PathBuf)> {
    let summary = summary_path(prefix);
    let mut w = csv::Writer::from_path(&summary)?;
    w.serialize(SummaryRow::from(report))?;
    w.flush()?;

    let retrains = retrain_path(prefix);
    // The header is written by hand so it appears even when there are no rows.
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(&retrains)?;
    w.write_record(["start_ms", "duration_ms", "total_keys", "delta_keys", "model_id", "train_ms"])?;
    for r in &report.retrain_log {
        w.serialize(RetrainCsv {
            start_ms: r.start_ms,
            duration_ms: r.duration_ms,
            total_keys: r.total_keys,
            delta_keys: r.delta_keys,
            model_id: r.model_id,
            train_ms: r.train_ms,
        })?;
    }
    w.flush()?;
    Ok((summary, retrains))
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(BenchError::from)).collect()
}

pub fn read_retrain_log(path: &Path) -> Result<Vec<RetrainRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize::<RetrainCsv>()
        .map(|row| {
            let row = row?;
            Ok(RetrainRow {
                start_ms: row.start_ms,
                duration_ms: row.duration_ms,
                total_keys: row.total_keys,
                delta_keys: row.delta_keys,
                model_id: row.model_id,
                train_ms: row.train_ms,
            })
        })
        .collect()
}

pub fn scaling_csv(points: &[ScalingPoint], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in points {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}
