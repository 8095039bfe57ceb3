//! Writes through one edge, reads through the other, and measures how
//! stale the reads are.

use std::time::Duration;

use enoki_core::netem::Role;
use enoki_core::runtime::FunctionSpec;
use enoki_core::session::{decode_probe, encode_probe, StalenessProbeLog};
use enoki_core::{EnokiError, Result, Timestamp};

use super::{with_cluster, ScenarioConfig};
use crate::cluster::{CLIENT, CLOUD, EDGE, EDGE_2};
use crate::metrics::MetricSample;
use crate::workload::run_open_workload;

pub const REPLICATION_VARIANTS: [&str; 3] = ["cloud", "peer", "replicated"];

/// Delay between a tick's write and its read.
pub const READ_LAG: Duration = Duration::from_millis(2);

const THREADS: u32 = 16;

fn write_input(seq: u64, issued: Timestamp) -> Vec<u8> {
    let mut input = b"w|".to_vec();
    input.extend_from_slice(&encode_probe(seq, issued));
    input
}

enum Probe {
    Write { sample: MetricSample, seq: u64, issued: Timestamp },
    Read { sample: MetricSample, issued: Timestamp, seen: Option<u64> },
}

pub(super) async fn run(cfg: &ScenarioConfig) -> Result<Vec<MetricSample>> {
    let topology = cfg.topology(&[
        (CLIENT, Role::Client),
        (EDGE, Role::Edge),
        (EDGE_2, Role::Edge),
        (CLOUD, Role::Cloud),
    ])?;
    with_cluster(topology, |cluster| async move {
        let spec = FunctionSpec::new("rwitem", "rwitem").threads(THREADS);
        let remote = spec.clone().replicate_from_existing(false);
        match cfg.variant.as_str() {
            "cloud" => {
                cluster.node(CLOUD)?.deploy(spec).await?;
                cluster.node(EDGE)?.deploy(remote.clone()).await?;
                cluster.node(EDGE_2)?.deploy(remote).await?;
            }
            "peer" => {
                cluster.node(EDGE)?.deploy(spec).await?;
                cluster.node(EDGE_2)?.deploy(remote).await?;
            }
            "replicated" => {
                cluster.node(EDGE)?.deploy(spec.clone()).await?;
                cluster.node(EDGE_2)?.deploy(spec).await?;
            }
            other => return Err(EnokiError::bad_request(format!("unknown replication variant {other:?}"))),
        }
        let writer = cluster.invoker(CLIENT, EDGE)?;
        let reader = cluster.invoker(CLIENT, EDGE_2)?;

        let mut log = StalenessProbeLog::new();
        let seeded = Timestamp::now();
        writer.invoke("rwitem", write_input(0, seeded)).await?;
        log.record_probe_write(0, seeded)?;
        cluster.quiesce(Duration::from_secs(5)).await;

        let probes = run_open_workload(cfg.rate(), cfg.duration, |i| {
            let seq = i + 1;
            let issued = Timestamp::now();
            let (writer, reader, cfg) = (writer.clone(), reader.clone(), cfg.clone());
            async move {
                let read = {
                    let cfg = cfg.clone();
                    tokio::spawn(async move {
                        tokio::time::sleep(READ_LAG).await;
                        let issued = Timestamp::now();
                        let res = reader.invoke("rwitem", "r").await;
                        let seen = res.as_ref().ok().and_then(|raw| decode_probe(raw).ok()).map(|(seq, _)| seq);
                        Probe::Read {
                            sample: cfg.sample("read", issued, seen.is_some()),
                            issued,
                            seen,
                        }
                    })
                };
                let ok = writer.invoke("rwitem", write_input(seq, issued)).await.is_ok();
                let write = Probe::Write {
                    sample: cfg.sample("write", issued, ok),
                    seq,
                    issued,
                };
                let read = read.await.expect("read probe task");
                vec![write, read]
            }
        })
        .await?;

        for p in &probes {
            if let Probe::Write { sample, seq, issued } = p {
                if sample.ok {
                    log.record_probe_write(*seq, *issued)?;
                }
            }
        }
        let mut samples = Vec::with_capacity(probes.len());
        for p in probes {
            match p {
                Probe::Write { sample, .. } => samples.push(sample),
                Probe::Read { mut sample, issued, seen } => {
                    if let Some(seq) = seen {
                        log.record_probe_read(issued, seq);
                        sample.staleness_us = log.staleness_of(issued, seq)?.map(|d| d.as_micros() as u64);
                    }
                    samples.push(sample);
                }
            }
        }
        Ok(samples)
    })
    .await
}
