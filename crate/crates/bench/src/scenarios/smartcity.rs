//! Smart-city application: eight functions split between edge and cloud.

use enoki_core::netem::Role;
use enoki_core::runtime::FunctionSpec;
use enoki_core::{Result, Timestamp};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use super::{with_cluster, ScenarioConfig, StoreAt};
use crate::cluster::{CLIENT, CLOUD, EDGE};
use crate::metrics::MetricSample;
use crate::workload::{open_request_count, run_open_workload};

const THREADS: u32 = 100;

const AT_EDGE: [&str; 4] = ["weathersensorfilter", "trafficsensorfilter", "objectrecognition", "movementplan"];
const AT_CLOUD: [&str; 4] = ["emergencydetection", "lightphasecalculation", "trafficstatistics", "airqualityaggregator"];

/// One client request: the function to call, its input, and the label
/// it is reported under.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlannedRequest {
    pub function: &'static str,
    pub input: String,
    pub op: String,
}

/// The request sequence for one run; a pure function of the seed.
pub fn request_plan(seed: u64, count: u64) -> Vec<PlannedRequest> {
    let mut rng = StdRng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let pick = rng.random_range(0..100u32);
            let pass = rng.random_bool(0.5);
            let plan = rng.random_bool(0.5);
            let input = format!("pass={};plan={}", pass as u8, plan as u8);
            let (function, op) = match pick {
                0..45 => ("trafficsensorfilter", if pass { "pass" } else { "filtered" }),
                45..90 => ("objectrecognition", if plan { "plan" } else { "noplan" }),
                _ => ("weathersensorfilter", if pass { "pass" } else { "filtered" }),
            };
            PlannedRequest {
                function,
                input,
                op: format!("{function}.{op}"),
            }
        })
        .collect()
}

fn spec(name: &str) -> FunctionSpec {
    let mut spec = FunctionSpec::new(name, name).threads(THREADS);
    for remote in AT_CLOUD {
        spec = spec.env(format!("route.{remote}"), CLOUD);
    }
    spec
}

pub(super) async fn run(cfg: &ScenarioConfig, seed: u64) -> Result<Vec<MetricSample>> {
    let store = StoreAt::parse(&cfg.variant)?;
    let topology = cfg.topology(&[(CLIENT, Role::Client), (EDGE, Role::Edge), (CLOUD, Role::Cloud)])?;
    let plan = request_plan(seed, open_request_count(cfg.rate(), cfg.duration));
    with_cluster(topology, |cluster| async move {
        let (edge, cloud) = (cluster.node(EDGE)?, cluster.node(CLOUD)?);
        // The persisting functions' keygroups live with whoever deploys
        // first; the other side reaches them remotely.
        let (first, second) = match store {
            StoreAt::Edge => (edge, cloud),
            StoreAt::Cloud => (cloud, edge),
        };
        for f in ["movementplan", "trafficstatistics", "airqualityaggregator"] {
            first.deploy(spec(f)).await?;
            second.deploy(spec(f).replicate_from_existing(false)).await?;
        }
        for f in AT_EDGE.into_iter().filter(|f| *f != "movementplan") {
            edge.deploy(spec(f)).await?;
        }
        for f in ["emergencydetection", "lightphasecalculation"] {
            cloud.deploy(spec(f)).await?;
        }
        let invoker = cluster.invoker(CLIENT, EDGE)?;
        run_open_workload(cfg.rate(), cfg.duration, |i| {
            let req = plan[i as usize].clone();
            let (invoker, cfg) = (invoker.clone(), cfg.clone());
            async move {
                let start = Timestamp::now();
                let ok = invoker.invoke(req.function, req.input).await.is_ok();
                vec![cfg.sample(&req.op, start, ok)]
            }
        })
        .await
    })
    .await
}
