#![allow(dead_code)]

use std::collections::HashMap;
use std::sync::Arc;

use enoki_core::naming::NamingServer;
use enoki_core::netem::topology::{DefaultLink, LinkSpec};
use enoki_core::netem::{Netem, RpcClient, Role, Topology, TopologyNode};
use enoki_core::noded::{Node, NodeConfig};
use enoki_core::NodeId;
use tokio::net::TcpListener;

pub fn n(s: &str) -> NodeId {
    NodeId::new(s).unwrap()
}

pub struct Cluster {
    pub naming: NamingServer,
    pub nodes: HashMap<String, Arc<Node>>,
    pub topology: Arc<Topology>,
}

impl Cluster {
    pub fn node(&self, id: &str) -> &Arc<Node> {
        &self.nodes[id]
    }

    /// RPC client shaped as traffic from topology node `from` to `to`.
    pub fn client(&self, from: &str, to: &str) -> RpcClient {
        let netem = Arc::new(Netem::new(n(from), self.topology.clone()));
        RpcClient::new(self.node(to).rpc_addr().to_string(), Some(n(to)), netem)
    }

    pub async fn shutdown(&self) {
        for node in self.nodes.values() {
            node.shutdown().await;
        }
    }
}

/// Starts a naming service plus every non-client node of the topology.
pub async fn start(nodes: &[(&str, Role)], links: &[(&str, &str, f64, f64)]) -> Cluster {
    let mut listeners = HashMap::new();
    let mut topo_nodes = Vec::new();
    for (id, role) in nodes {
        let mut addr = String::new();
        if *role != Role::Client {
            let rpc = TcpListener::bind("127.0.0.1:0").await.unwrap();
            let http = TcpListener::bind("127.0.0.1:0").await.unwrap();
            addr = rpc.local_addr().unwrap().to_string();
            listeners.insert(id.to_string(), (rpc, http));
        }
        topo_nodes.push(TopologyNode {
            id: n(id),
            role: *role,
            addr,
        });
    }
    let topology = Topology {
        nodes: topo_nodes,
        links: links
            .iter()
            .map(|(a, b, rtt_ms, mbps)| LinkSpec {
                a: n(a),
                b: n(b),
                rtt_ms: *rtt_ms,
                mbps: *mbps,
            })
            .collect(),
        default: DefaultLink::default(),
    };
    topology.validate().unwrap();
    let naming = NamingServer::start("127.0.0.1:0").await.unwrap();
    let mut started = HashMap::new();
    for (id, role) in nodes {
        let Some((rpc, http)) = listeners.remove(*id) else { continue };
        let config = NodeConfig {
            id: n(id),
            listen_http: http.local_addr().unwrap().to_string(),
            listen_rpc: rpc.local_addr().unwrap().to_string(),
            naming_addr: naming.addr.to_string(),
            topology_path: Default::default(),
            role: *role,
        };
        let node = Node::start_with(config, topology.clone(), rpc, http).await.unwrap();
        started.insert(id.to_string(), node);
    }
    Cluster {
        naming,
        nodes: started,
        topology: Arc::new(topology),
    }
}

/// Waits until no node has replication updates in flight.
pub async fn quiesce(cluster: &Cluster) {
    let deadline = std::time::Instant::now() + std::time::Duration::from_secs(20);
    loop {
        if cluster.nodes.values().all(|n| n.replicator().outstanding() == 0) {
            return;
        }
        assert!(std::time::Instant::now() < deadline, "replication did not drain");
        tokio::time::sleep(std::time::Duration::from_millis(5)).await;
    }
}
