//! Benchmark harness: in-process clusters, workload generators, the
//! scenario drivers and CSV reports.

pub mod cluster;
pub mod metrics;
pub mod report;
pub mod scenarios;
pub mod workload;

pub use metrics::{percentile, MetricSample, Summary};
pub use scenarios::{run_scenario, Load, Scenario, ScenarioConfig, ScenarioReport};
