mod common;

use std::time::{Duration, Instant};

use common::{n, quiesce, start, Cluster};
use enoki_core::netem::Role;
use enoki_core::runtime::FunctionSpec;
use enoki_core::session::Session;
use enoki_core::{ErrorKind, KeygroupName};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn kg(s: &str) -> KeygroupName {
    KeygroupName::new(s).unwrap()
}

async fn deploy_everywhere(cluster: &Cluster, nodes: &[&str], group: &str) {
    for (i, id) in nodes.iter().enumerate() {
        let spec = FunctionSpec::new(format!("f-{group}"), "echo").keygroup(kg(group));
        let res = cluster.node(id).deploy(spec).await.unwrap();
        assert_eq!(res.created_keygroup, i == 0);
        if i > 0 {
            assert_eq!(res.replicated_from, Some(n(nodes[0])));
        }
    }
}

fn assert_identical(cluster: &Cluster, nodes: &[&str], group: &str) {
    let first = cluster.node(nodes[0]).store().snapshot(&kg(group)).unwrap();
    for id in &nodes[1..] {
        let other = cluster.node(id).store().snapshot(&kg(group)).unwrap();
        assert_eq!(first, other, "{} and {id} diverged on {group}", nodes[0]);
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn replicas_converge_under_random_interleavings() {
    let cluster = start(
        &[("e1", Role::Edge), ("e2", Role::Edge), ("e3", Role::Edge)],
        &[("e1", "e2", 2.0, 0.0), ("e2", "e3", 4.0, 0.0), ("e1", "e3", 1.0, 0.0)],
    )
    .await;
    let mut rng = StdRng::seed_from_u64(7);
    for run in 0..120 {
        let nodes: &[&str] = if run % 2 == 0 { &["e1", "e2"] } else { &["e1", "e2", "e3"] };
        let group = format!("conv-{run}");
        deploy_everywhere(&cluster, nodes, &group).await;
        let mut writers = Vec::new();
        for id in nodes {
            let ops: Vec<(u8, u8, u64)> = (0..rng.random_range(3..12))
                .map(|_| (rng.random_range(0..3u8), rng.random_range(0..3u8), rng.random_range(0..3u64)))
                .collect();
            let node = cluster.node(id).clone();
            let group = kg(&group);
            writers.push(tokio::spawn(async move {
                let s = Session::new(group, node.endpoint());
                for (op, key, pause) in ops {
                    let key = format!("k{key}");
                    let _ = match op {
                        0 | 1 => s.set(&key, format!("{}-{op}", node.id())).await,
                        _ => s.delete(&key).await,
                    };
                    tokio::time::sleep(Duration::from_millis(pause)).await;
                }
            }));
        }
        for w in writers {
            w.await.unwrap();
        }
        quiesce(&cluster).await;
        assert_identical(&cluster, nodes, &group);
    }
    cluster.shutdown().await;
}

async fn median_put(cluster: &Cluster, node: &str, group: &str) -> Duration {
    let s = Session::new(kg(group), cluster.node(node).endpoint());
    let value = vec![7u8; 1 << 20];
    let mut times = Vec::new();
    for i in 0..41 {
        let t = Instant::now();
        s.set(&format!("k{}", i % 4), value.clone()).await.unwrap();
        times.push(t.elapsed());
    }
    times.sort();
    times[times.len() / 2]
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn writes_do_not_wait_for_peers() {
    let cluster = start(
        &[("a", Role::Edge), ("b", Role::Edge), ("c", Role::Edge), ("solo", Role::Edge)],
        &[("a", "b", 200.0, 10.0), ("a", "c", 300.0, 10.0)],
    )
    .await;
    cluster
        .node("solo")
        .deploy(FunctionSpec::new("alone", "echo"))
        .await
        .unwrap();
    deploy_everywhere(&cluster, &["a", "b", "c"], "shared").await;
    let alone = median_put(&cluster, "solo", "alone").await;
    let shared = median_put(&cluster, "a", "shared").await;
    let diff = alone.abs_diff(shared);
    assert!(diff < Duration::from_millis(2), "0 peers {alone:?} vs 2 slow peers {shared:?}");
    cluster.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn bootstrap_while_writes_continue() {
    let cluster = start(
        &[("e1", Role::Edge), ("e2", Role::Edge), ("e3", Role::Edge)],
        &[("e1", "e2", 10.0, 0.0), ("e1", "e3", 10.0, 0.0), ("e2", "e3", 10.0, 0.0)],
    )
    .await;
    cluster.node("e1").deploy(FunctionSpec::new("w", "echo")).await.unwrap();
    let writer = {
        let node = cluster.node("e1").clone();
        tokio::spawn(async move {
            let s = Session::new(kg("w"), node.endpoint());
            for i in 0..400 {
                s.set(&format!("k{:03}", i % 50), format!("{i}")).await.unwrap();
                tokio::time::sleep(Duration::from_micros(500)).await;
            }
        })
    };
    tokio::time::sleep(Duration::from_millis(20)).await;
    let r2 = cluster.node("e2").deploy(FunctionSpec::new("w", "echo")).await.unwrap();
    assert_eq!(r2.replicated_from, Some(n("e1")));
    let r3 = cluster.node("e3").deploy(FunctionSpec::new("w", "echo")).await.unwrap();
    assert_eq!(r3.replicated_from, Some(n("e1")));
    writer.await.unwrap();
    quiesce(&cluster).await;
    assert_identical(&cluster, &["e1", "e2", "e3"], "w");
    assert_eq!(cluster.node("e3").store().keygroup(&kg("w")).unwrap().len(), 50);
    cluster.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn deletes_replicate() {
    let cluster = start(&[("e1", Role::Edge), ("e2", Role::Edge)], &[("e1", "e2", 20.0, 100.0)]).await;
    deploy_everywhere(&cluster, &["e1", "e2"], "d").await;
    let s1 = Session::new(kg("d"), cluster.node("e1").endpoint());
    s1.set("k", "v").await.unwrap();
    s1.delete("k").await.unwrap();
    quiesce(&cluster).await;
    let s2 = Session::new(kg("d"), cluster.node("e2").endpoint());
    assert!(s2.get("k").await.unwrap_err().is(ErrorKind::NotFound));
    assert!(cluster.node("e2").store().get_raw(&kg("d"), "k").unwrap().unwrap().tombstone);
    cluster.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn duplicate_deliveries_do_not_change_state() {
    let cluster = start(&[("e1", Role::Edge), ("e2", Role::Edge)], &[]).await;
    deploy_everywhere(&cluster, &["e1", "e2"], "dup").await;
    let s1 = Session::new(kg("dup"), cluster.node("e1").endpoint());
    for i in 0..10 {
        s1.set(&format!("k{i}"), format!("{i}")).await.unwrap();
    }
    quiesce(&cluster).await;
    let before = cluster.node("e2").store().snapshot(&kg("dup")).unwrap();
    for entry in cluster.node("e1").store().snapshot(&kg("dup")).unwrap() {
        cluster.node("e2").replicator().apply_update(&kg("dup"), entry).unwrap();
    }
    assert_eq!(cluster.node("e2").store().snapshot(&kg("dup")).unwrap(), before);
    cluster.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn naming_is_off_the_data_path() {
    let cluster = start(&[("e1", Role::Edge), ("e2", Role::Edge)], &[("e1", "e2", 4.0, 0.0)]).await;
    deploy_everywhere(&cluster, &["e1", "e2"], "quiet").await;
    let before = cluster.naming.service.request_count();
    for id in ["e1", "e2"] {
        let s = Session::new(kg("quiet"), cluster.node(id).endpoint());
        for i in 0..20 {
            s.set(&format!("k{i}"), "v").await.unwrap();
            s.get(&format!("k{i}")).await.unwrap();
        }
        s.scan("k", 5).await.unwrap();
    }
    quiesce(&cluster).await;
    assert_eq!(cluster.naming.service.request_count(), before);
    cluster.shutdown().await;
}
