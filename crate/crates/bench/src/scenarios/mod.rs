//! Scenario drivers. Every repetition runs against a freshly launched
//! in-process cluster.

mod replication;
mod single;
mod smartcity;
mod throughput;

use std::fmt;
use std::future::Future;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Duration;

use enoki_core::netem::{Role, Topology};
use enoki_core::{EnokiError, Result, Timestamp};

use crate::cluster::{apply_link_overrides, scenario_topology, BenchCluster};
use crate::metrics::{summarize, summarize_reps, MetricSample, Summary};

pub use replication::{READ_LAG, REPLICATION_VARIANTS};
pub use smartcity::{request_plan, PlannedRequest};
pub use throughput::SIZES;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scenario {
    Single,
    ThroughputRead,
    ThroughputWrite,
    Replication,
    SmartCity,
}

impl Scenario {
    pub const ALL: [Scenario; 5] = [
        Scenario::Single,
        Scenario::ThroughputRead,
        Scenario::ThroughputWrite,
        Scenario::Replication,
        Scenario::SmartCity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Single => "single",
            Scenario::ThroughputRead => "throughput-read",
            Scenario::ThroughputWrite => "throughput-write",
            Scenario::Replication => "replication",
            Scenario::SmartCity => "smartcity",
        }
    }

    pub fn variants(self) -> &'static [&'static str] {
        match self {
            Scenario::Replication => &REPLICATION_VARIANTS,
            _ => &["store=cloud", "store=edge"],
        }
    }

    pub fn duration(self, paper_scale: bool) -> Duration {
        let secs = match (self, paper_scale) {
            (Scenario::Single, false) => 60,
            (Scenario::Single, true) => 300,
            (Scenario::ThroughputRead | Scenario::ThroughputWrite, false) => 30,
            (Scenario::ThroughputRead | Scenario::ThroughputWrite, true) => 120,
            (Scenario::Replication, false) => 30,
            (Scenario::Replication, true) => 120,
            (Scenario::SmartCity, false) => 120,
            (Scenario::SmartCity, true) => 600,
        };
        Duration::from_secs(secs)
    }

    pub fn default_load(self) -> Load {
        match self {
            Scenario::Single | Scenario::Replication => Load::Open { rate_per_s: 10.0 },
            Scenario::SmartCity => Load::Open { rate_per_s: 5.0 },
            Scenario::ThroughputRead | Scenario::ThroughputWrite => Load::Closed { threads: 100 },
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = EnokiError;

    fn from_str(s: &str) -> Result<Scenario> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| EnokiError::bad_request(format!("unknown scenario {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Load {
    Open { rate_per_s: f64 },
    Closed { threads: usize },
}

#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub variant: String,
    /// Links in this file override the default link table.
    pub topology_path: Option<PathBuf>,
    pub load: Load,
    pub duration: Duration,
    pub repetitions: u32,
    /// Repetition `r` uses `seed + r`.
    pub seed: u64,
    /// Item sizes swept by the throughput scenarios.
    pub sizes: Vec<u64>,
}

impl ScenarioConfig {
    pub fn new(scenario: Scenario, variant: impl Into<String>) -> ScenarioConfig {
        ScenarioConfig {
            scenario,
            variant: variant.into(),
            topology_path: None,
            load: scenario.default_load(),
            duration: scenario.duration(false),
            repetitions: 3,
            seed: 1,
            sizes: SIZES.to_vec(),
        }
    }

    pub fn paper_scale(mut self) -> ScenarioConfig {
        self.duration = self.scenario.duration(true);
        self
    }

    pub fn duration(mut self, d: Duration) -> ScenarioConfig {
        self.duration = d;
        self
    }

    pub fn repetitions(mut self, n: u32) -> ScenarioConfig {
        self.repetitions = n;
        self
    }

    pub fn seed(mut self, seed: u64) -> ScenarioConfig {
        self.seed = seed;
        self
    }

    pub fn sizes(mut self, sizes: Vec<u64>) -> ScenarioConfig {
        self.sizes = sizes;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !self.scenario.variants().contains(&self.variant.as_str()) {
            return Err(EnokiError::bad_request(format!(
                "scenario {} has no variant {:?}; expected one of {:?}",
                self.scenario,
                self.variant,
                self.scenario.variants()
            )));
        }
        match (self.scenario.default_load(), self.load) {
            (Load::Open { .. }, Load::Open { rate_per_s }) if rate_per_s > 0.0 => {}
            (Load::Closed { .. }, Load::Closed { threads }) if threads > 0 => {}
            (_, load) => return Err(EnokiError::bad_request(format!("{load:?} does not fit {}", self.scenario))),
        }
        if self.repetitions == 0 || self.duration.is_zero() {
            return Err(EnokiError::bad_request("need at least one repetition of nonzero duration"));
        }
        if matches!(self.scenario, Scenario::ThroughputRead | Scenario::ThroughputWrite) && self.sizes.is_empty() {
            return Err(EnokiError::bad_request("throughput scenarios need at least one size"));
        }
        Ok(())
    }

    fn rate(&self) -> f64 {
        match self.load {
            Load::Open { rate_per_s } => rate_per_s,
            Load::Closed { .. } => unreachable!("validated"),
        }
    }

    fn threads(&self) -> usize {
        match self.load {
            Load::Closed { threads } => threads,
            Load::Open { .. } => unreachable!("validated"),
        }
    }

    fn topology(&self, nodes: &[(&str, Role)]) -> Result<Topology> {
        let mut t = scenario_topology(nodes)?;
        if let Some(path) = &self.topology_path {
            apply_link_overrides(&mut t, path)?;
        }
        Ok(t)
    }

    fn sample(&self, op: &str, start: Timestamp, ok: bool) -> MetricSample {
        MetricSample::new(self.scenario.name(), &self.variant, op, start, Timestamp::now(), ok)
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioReport {
    pub samples: Vec<MetricSample>,
    pub summaries: Vec<Summary>,
}

impl ScenarioReport {
    pub fn from_samples(samples: Vec<MetricSample>, window: Duration) -> ScenarioReport {
        let summaries = summarize(&samples, window);
        ScenarioReport { samples, summaries }
    }

    pub fn from_reps(reps: Vec<Vec<MetricSample>>, window: Duration) -> ScenarioReport {
        let summaries = summarize_reps(&reps, window);
        ScenarioReport {
            samples: reps.into_iter().flatten().collect(),
            summaries,
        }
    }

    /// Latencies in microseconds of successful samples of `op`.
    pub fn latencies(&self, op: &str) -> Vec<u64> {
        self.samples
            .iter()
            .filter(|s| s.ok && s.op == op)
            .map(|s| s.latency_us)
            .collect()
    }

    pub fn summary(&self, op: &str) -> Option<&Summary> {
        self.summaries.iter().find(|s| s.op == op)
    }

    pub fn merge(reports: impl IntoIterator<Item = ScenarioReport>) -> ScenarioReport {
        let mut out = ScenarioReport {
            samples: Vec::new(),
            summaries: Vec::new(),
        };
        for r in reports {
            out.samples.extend(r.samples);
            out.summaries.extend(r.summaries);
        }
        out
    }
}

/// Runs every repetition. Throughput repetitions run one after another
/// since they saturate the machine; the others run concurrently.
pub async fn run_scenario(cfg: ScenarioConfig) -> Result<ScenarioReport> {
    cfg.validate()?;
    let mut reps = Vec::new();
    match cfg.scenario {
        Scenario::ThroughputRead | Scenario::ThroughputWrite => {
            for rep in 0..cfg.repetitions {
                reps.push(run_rep(cfg.clone(), rep).await?);
            }
        }
        _ => {
            let running: Vec<_> = (0..cfg.repetitions)
                .map(|rep| tokio::spawn(run_rep(cfg.clone(), rep)))
                .collect();
            for r in running {
                reps.push(r.await.map_err(|e| EnokiError::internal(format!("repetition failed: {e}")))??);
            }
        }
    }
    let report = ScenarioReport::from_reps(reps, cfg.duration);
    log::info!("{} {}: {} samples", cfg.scenario, cfg.variant, report.samples.len());
    Ok(report)
}

async fn run_rep(cfg: ScenarioConfig, rep: u32) -> Result<Vec<MetricSample>> {
    let seed = cfg.seed + rep as u64;
    match cfg.scenario {
        Scenario::Single => single::run(&cfg).await,
        Scenario::ThroughputRead => throughput::run(&cfg, false).await,
        Scenario::ThroughputWrite => throughput::run(&cfg, true).await,
        Scenario::Replication => replication::run(&cfg).await,
        Scenario::SmartCity => smartcity::run(&cfg, seed).await,
    }
}

/// Where a function's keygroup lives in the two-variant scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum StoreAt {
    Edge,
    Cloud,
}

impl StoreAt {
    fn parse(variant: &str) -> Result<StoreAt> {
        match variant {
            "store=edge" => Ok(StoreAt::Edge),
            "store=cloud" => Ok(StoreAt::Cloud),
            other => Err(EnokiError::bad_request(format!("unknown variant {other:?}"))),
        }
    }
}

/// Launches a cluster, runs `body` against it and shuts it down even if
/// `body` failed.
async fn with_cluster<F, Fut, T>(topology: Topology, body: F) -> Result<T>
where
    F: FnOnce(std::sync::Arc<BenchCluster>) -> Fut,
    Fut: Future<Output = Result<T>>,
{
    let cluster = std::sync::Arc::new(BenchCluster::launch(topology).await?);
    let out = body(cluster.clone()).await;
    cluster.shutdown().await;
    out
}
