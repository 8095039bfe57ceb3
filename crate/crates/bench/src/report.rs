//! CSV output.

use std::path::Path;

use enoki_core::{EnokiError, Result};
use serde::Serialize;

use crate::metrics::{MetricSample, Summary};
use crate::scenarios::ScenarioReport;

pub const REPORT_FILE: &str = "report.csv";
pub const SUMMARY_FILE: &str = "summary.csv";

fn csv_error(e: csv::Error) -> EnokiError {
    EnokiError::internal(format!("writing csv: {e}"))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(csv_error)?;
    w.write_record(header).map_err(csv_error)?;
    for row in rows {
        w.serialize(row).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub const SAMPLE_COLUMNS: [&str; 9] = [
    "scenario",
    "variant",
    "op",
    "start_us",
    "end_us",
    "latency_us",
    "ok",
    "size_bytes",
    "staleness_us",
];

pub const SUMMARY_COLUMNS: [&str; 14] = [
    "scenario",
    "variant",
    "op",
    "count",
    "error_count",
    "p50_us",
    "p90_us",
    "p99_us",
    "ops_per_s",
    "mb_per_s",
    "stale_reads",
    "staleness_p50_us",
    "staleness_p99_us",
    "staleness_max_us",
];

pub fn write_samples(path: &Path, samples: &[MetricSample]) -> Result<()> {
    write_csv(path, samples, &SAMPLE_COLUMNS)
}

pub fn write_summaries(path: &Path, summaries: &[Summary]) -> Result<()> {
    write_csv(path, summaries, &SUMMARY_COLUMNS)
}

/// Writes `report.csv` and `summary.csv` into `dir`, creating it.
pub fn write_report(dir: &Path, report: &ScenarioReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_samples(&dir.join(REPORT_FILE), &report.samples)?;
    write_summaries(&dir.join(SUMMARY_FILE), &report.summaries)
}
