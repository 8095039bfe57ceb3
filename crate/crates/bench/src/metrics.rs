//! Samples, percentiles and per-variant aggregates.

use std::collections::BTreeMap;
use std::time::Duration;

use enoki_core::{EnokiError, Result, Timestamp};
use serde::Serialize;

/// One request as observed by a benchmark client. Serializes to the
/// report CSV row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricSample {
    pub scenario: String,
    pub variant: String,
    pub op: String,
    pub start_us: u64,
    pub end_us: u64,
    pub latency_us: u64,
    pub ok: bool,
    pub size_bytes: u64,
    pub staleness_us: Option<u64>,
}

impl MetricSample {
    pub fn new(scenario: &str, variant: &str, op: &str, start: Timestamp, end: Timestamp, ok: bool) -> Self {
        let end = end.max(start);
        MetricSample {
            scenario: scenario.to_owned(),
            variant: variant.to_owned(),
            op: op.to_owned(),
            start_us: start.micros(),
            end_us: end.micros(),
            latency_us: end.micros() - start.micros(),
            ok,
            size_bytes: 0,
            staleness_us: None,
        }
    }

    pub fn size(mut self, bytes: u64) -> Self {
        self.size_bytes = bytes;
        self
    }

    pub fn latency(&self) -> Duration {
        Duration::from_micros(self.latency_us)
    }
}

/// Nearest-rank percentile of `samples` for `0 < p <= 100`.
pub fn percentile<T: Copy + Ord>(samples: &[T], p: f64) -> Result<T> {
    if samples.is_empty() {
        return Err(EnokiError::bad_request("percentile of an empty sample set"));
    }
    if !(p > 0.0 && p <= 100.0) {
        return Err(EnokiError::bad_request(format!("percentile {p} out of range")));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_unstable();
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    Ok(sorted[rank.clamp(1, sorted.len()) - 1])
}

pub fn median<T: Copy + Ord>(samples: &[T]) -> Result<T> {
    percentile(samples, 50.0)
}

/// Aggregates for one (scenario, variant, op) group.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub scenario: String,
    pub variant: String,
    pub op: String,
    pub count: usize,
    pub error_count: usize,
    pub p50_us: Option<u64>,
    pub p90_us: Option<u64>,
    pub p99_us: Option<u64>,
    pub ops_per_s: f64,
    pub mb_per_s: f64,
    pub stale_reads: usize,
    pub staleness_p50_us: Option<u64>,
    pub staleness_p99_us: Option<u64>,
    pub staleness_max_us: Option<u64>,
}

/// Summarizes samples of one run. Throughput counts successful requests
/// that completed within `window` of the earliest start.
pub fn summarize(samples: &[MetricSample], window: Duration) -> Vec<Summary> {
    let mut groups: BTreeMap<(&str, &str, &str), Vec<&MetricSample>> = BTreeMap::new();
    for s in samples {
        groups
            .entry((s.scenario.as_str(), s.variant.as_str(), s.op.as_str()))
            .or_default()
            .push(s);
    }
    let secs = window.as_secs_f64().max(1e-9);
    groups
        .into_iter()
        .map(|((scenario, variant, op), group)| {
            let ok: Vec<u64> = group.iter().filter(|s| s.ok).map(|s| s.latency_us).collect();
            let start = group.iter().map(|s| s.start_us).min().unwrap_or(0);
            let cutoff = start + window.as_micros() as u64;
            let done: Vec<&&MetricSample> = group.iter().filter(|s| s.ok && s.end_us <= cutoff).collect();
            let bytes: u64 = done.iter().map(|s| s.size_bytes).sum();
            let stale: Vec<u64> = group.iter().filter_map(|s| s.staleness_us).collect();
            Summary {
                scenario: scenario.to_owned(),
                variant: variant.to_owned(),
                op: op.to_owned(),
                count: group.len(),
                error_count: group.len() - ok.len(),
                p50_us: percentile(&ok, 50.0).ok(),
                p90_us: percentile(&ok, 90.0).ok(),
                p99_us: percentile(&ok, 99.0).ok(),
                ops_per_s: done.len() as f64 / secs,
                mb_per_s: bytes as f64 / 1e6 / secs,
                stale_reads: stale.len(),
                staleness_p50_us: percentile(&stale, 50.0).ok(),
                staleness_p99_us: percentile(&stale, 99.0).ok(),
                staleness_max_us: stale.iter().max().copied(),
            }
        })
        .collect()
}

/// Like [`summarize`] over all repetitions pooled, except that
/// throughput is computed per repetition and averaged.
pub fn summarize_reps(reps: &[Vec<MetricSample>], window: Duration) -> Vec<Summary> {
    let pooled: Vec<MetricSample> = reps.iter().flatten().cloned().collect();
    let mut out = summarize(&pooled, window);
    let per_rep: Vec<Vec<Summary>> = reps.iter().map(|r| summarize(r, window)).collect();
    for s in &mut out {
        let matching = per_rep.iter().flatten().filter(|r| (&r.scenario, &r.variant, &r.op) == (&s.scenario, &s.variant, &s.op));
        let n = reps.len().max(1) as f64;
        let (ops, mb) = matching.fold((0.0, 0.0), |(o, m), r| (o + r.ops_per_s, m + r.mb_per_s));
        s.ops_per_s = ops / n;
        s.mb_per_s = mb / n;
    }
    out
}

/// Goodput in MB/s (1 MB = 10^6 bytes) of successful requests completing
/// within `window` after `start_us`.
pub fn goodput(samples: &[MetricSample], start_us: u64, window: Duration) -> f64 {
    let cutoff = start_us + window.as_micros() as u64;
    let bytes: u64 = samples
        .iter()
        .filter(|s| s.ok && s.end_us <= cutoff)
        .map(|s| s.size_bytes)
        .sum();
    bytes as f64 / 1e6 / window.as_secs_f64()
}
