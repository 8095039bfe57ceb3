//! Closed-loop reads or writes of fixed-size items.

use bytes::Bytes;
use enoki_core::netem::Role;
use enoki_core::runtime::FunctionSpec;
use enoki_core::session::Session;
use enoki_core::{KeygroupName, Result, Timestamp};

use super::{with_cluster, ScenarioConfig, StoreAt};
use crate::cluster::{CLIENT, CLOUD, EDGE};
use crate::metrics::MetricSample;
use crate::workload::run_closed_workload;

/// 1 B, 1 kB, 10 kB, 100 kB, 1 MB.
pub const SIZES: [u64; 5] = [1, 1_000, 10_000, 100_000, 1_000_000];

const THREADS: u32 = 100;

pub(super) async fn run(cfg: &ScenarioConfig, write: bool) -> Result<Vec<MetricSample>> {
    let store = StoreAt::parse(&cfg.variant)?;
    let topology = cfg.topology(&[(CLIENT, Role::Client), (EDGE, Role::Edge), (CLOUD, Role::Cloud)])?;
    let (function, verb) = if write { ("writen", "write") } else { ("readn", "read") };
    let kg = KeygroupName::new("blobs")?;
    with_cluster(topology, |cluster| async move {
        let spec = FunctionSpec::new(function, function).threads(THREADS).keygroup(kg.clone());
        let home = match store {
            StoreAt::Cloud => {
                cluster.node(CLOUD)?.deploy(spec.clone()).await?;
                cluster.node(EDGE)?.deploy(spec.replicate_from_existing(false)).await?;
                CLOUD
            }
            StoreAt::Edge => {
                cluster.node(EDGE)?.deploy(spec).await?;
                EDGE
            }
        };
        let invoker = cluster.invoker(CLIENT, EDGE)?;
        let mut samples = Vec::new();
        for &size in &cfg.sizes {
            if !write {
                Session::new(kg.clone(), cluster.node(home)?.endpoint())
                    .set("blob", Bytes::from(vec![0xa5u8; size as usize]))
                    .await?;
            }
            let op = format!("{verb}.{size}");
            let invoker = invoker.clone();
            let cfg2 = cfg.clone();
            samples.extend(
                run_closed_workload(cfg.threads(), cfg.duration, move |_, _| {
                    let (invoker, cfg, op) = (invoker.clone(), cfg2.clone(), op.clone());
                    async move {
                        let start = Timestamp::now();
                        let ok = invoker.invoke(function, size.to_string()).await.is_ok();
                        vec![cfg.sample(&op, start, ok).size(size)]
                    }
                })
                .await?,
            );
        }
        Ok(samples)
    })
    .await
}
