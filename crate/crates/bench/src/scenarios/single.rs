//! One stateful function: `movavg` at the edge with its keygroup either
//! local or at the cloud.

use enoki_core::netem::Role;
use enoki_core::runtime::FunctionSpec;
use enoki_core::{Result, Timestamp};

use super::{with_cluster, ScenarioConfig, StoreAt};
use crate::cluster::{CLIENT, CLOUD, EDGE};
use crate::metrics::MetricSample;
use crate::workload::run_open_workload;

const THREADS: u32 = 16;

pub(super) async fn run(cfg: &ScenarioConfig) -> Result<Vec<MetricSample>> {
    let store = StoreAt::parse(&cfg.variant)?;
    let topology = cfg.topology(&[(CLIENT, Role::Client), (EDGE, Role::Edge), (CLOUD, Role::Cloud)])?;
    with_cluster(topology, |cluster| async move {
        let spec = FunctionSpec::new("movavg", "movavg").threads(THREADS);
        if store == StoreAt::Cloud {
            cluster.node(CLOUD)?.deploy(spec.clone()).await?;
            cluster.node(EDGE)?.deploy(spec.replicate_from_existing(false)).await?;
        } else {
            cluster.node(EDGE)?.deploy(spec).await?;
        }
        let invoker = cluster.invoker(CLIENT, EDGE)?;
        run_open_workload(cfg.rate(), cfg.duration, |i| {
            let invoker = invoker.clone();
            let cfg = cfg.clone();
            async move {
                let start = Timestamp::now();
                let ok = invoker.invoke("movavg", (i + 1).to_string()).await.is_ok();
                vec![cfg.sample("movavg", start, ok)]
            }
        })
        .await
    })
    .await
}
