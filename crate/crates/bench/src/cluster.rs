//! In-process benchmark clusters: a naming service, one daemon per
//! non-client topology node, and shaped clients.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use bytes::Bytes;
use enoki_core::naming::NamingServer;
use enoki_core::netem::topology::{DefaultLink, LinkSpec};
use enoki_core::netem::{Netem, RpcClient, Role, Topology, TopologyNode};
use enoki_core::noded::{Node, NodeConfig};
use enoki_core::proto::{first_blob, InvokeMode, Request, Response};
use enoki_core::{EnokiError, NodeId, Result};
use parking_lot::Mutex;
use tokio::net::TcpListener;

pub const CLIENT: &str = "client";
pub const EDGE: &str = "edge-1";
pub const EDGE_2: &str = "edge-2";
pub const CLOUD: &str = "cloud-1";

/// Default (rtt ms, Mb/s) between two roles.
pub fn default_link(a: Role, b: Role) -> (f64, f64) {
    use Role::*;
    match (a, b) {
        (Client, Edge) | (Edge, Client) => (10.0, 1000.0),
        (Client, Cloud) | (Cloud, Client) => (60.0, 100.0),
        (Edge, Cloud) | (Cloud, Edge) => (50.0, 100.0),
        (Edge, Edge) => (20.0, 100.0),
        _ => (0.0, 0.0),
    }
}

fn node_id(s: &str) -> Result<NodeId> {
    NodeId::new(s)
}

/// Full mesh over `nodes` with the default link table. Addresses are
/// filled in at launch.
pub fn scenario_topology(nodes: &[(&str, Role)]) -> Result<Topology> {
    let mut links = Vec::new();
    for (i, (a, ra)) in nodes.iter().enumerate() {
        for (b, rb) in &nodes[i + 1..] {
            let (rtt_ms, mbps) = default_link(*ra, *rb);
            links.push(LinkSpec {
                a: node_id(a)?,
                b: node_id(b)?,
                rtt_ms,
                mbps,
            });
        }
    }
    let topology = Topology {
        nodes: nodes
            .iter()
            .map(|(id, role)| {
                Ok(TopologyNode {
                    id: node_id(id)?,
                    role: *role,
                    addr: String::new(),
                })
            })
            .collect::<Result<_>>()?,
        links,
        default: DefaultLink::default(),
    };
    topology.validate()?;
    Ok(topology)
}

/// Copies the links of a topology file onto `topology`, skipping links
/// between nodes the scenario does not have.
pub fn apply_link_overrides(topology: &mut Topology, path: &Path) -> Result<()> {
    let file = Topology::load(path)?;
    for link in &file.links {
        if topology.node(&link.a).is_some() && topology.node(&link.b).is_some() {
            topology.set_link(&link.a, &link.b, link.rtt_ms, link.mbps);
        }
    }
    Ok(())
}

pub struct BenchCluster {
    naming: NamingServer,
    nodes: HashMap<NodeId, Arc<Node>>,
    topology: Arc<Topology>,
    netems: Mutex<HashMap<NodeId, Arc<Netem>>>,
    clients: Mutex<HashMap<(NodeId, NodeId), Arc<RpcClient>>>,
}

impl BenchCluster {
    /// Binds every daemon's listeners, records the addresses in the
    /// topology and starts the naming service plus all daemons. Fails
    /// with Unavailable if a daemon does not answer a ping afterwards.
    pub async fn launch(mut topology: Topology) -> Result<BenchCluster> {
        let mut listeners = HashMap::new();
        for node in topology.nodes.iter_mut().filter(|n| n.role != Role::Client) {
            let rpc = TcpListener::bind("127.0.0.1:0").await?;
            let http = TcpListener::bind("127.0.0.1:0").await?;
            node.addr = rpc.local_addr()?.to_string();
            listeners.insert(node.id.clone(), (rpc, http));
        }
        topology.validate()?;
        let naming = NamingServer::start("127.0.0.1:0").await?;
        let mut nodes = HashMap::new();
        for spec in &topology.nodes {
            let Some((rpc, http)) = listeners.remove(&spec.id) else { continue };
            let config = NodeConfig {
                id: spec.id.clone(),
                listen_http: http.local_addr()?.to_string(),
                listen_rpc: rpc.local_addr()?.to_string(),
                naming_addr: naming.addr.to_string(),
                topology_path: Default::default(),
                role: spec.role,
            };
            let node = Node::start_with(config, topology.clone(), rpc, http).await?;
            nodes.insert(spec.id.clone(), node);
        }
        let cluster = BenchCluster {
            naming,
            nodes,
            topology: Arc::new(topology),
            netems: Mutex::new(HashMap::new()),
            clients: Mutex::new(HashMap::new()),
        };
        for node in cluster.nodes.values() {
            let probe = RpcClient::new(node.rpc_addr().to_string(), Some(node.id().clone()), Arc::new(Netem::disabled()));
            probe
                .ping()
                .await
                .map_err(|e| EnokiError::unavailable(format!("{} unreachable at start: {e}", node.id())))?;
        }
        Ok(cluster)
    }

    pub fn topology(&self) -> &Arc<Topology> {
        &self.topology
    }

    pub fn node(&self, id: &str) -> Result<&Arc<Node>> {
        self.nodes
            .get(&node_id(id)?)
            .ok_or_else(|| EnokiError::not_found(format!("no daemon {id} in this cluster")))
    }

    /// RPC client whose traffic is shaped as sent by topology node
    /// `from` to the daemon `to`. Clients are cached per pair.
    pub fn rpc(&self, from: &str, to: &str) -> Result<Arc<RpcClient>> {
        let (from, to) = (node_id(from)?, node_id(to)?);
        if self.topology.node(&from).is_none() {
            return Err(EnokiError::not_found(format!("{from} is not in the topology")));
        }
        let addr = self.node(to.as_str())?.rpc_addr().to_string();
        let mut clients = self.clients.lock();
        if let Some(c) = clients.get(&(from.clone(), to.clone())) {
            return Ok(c.clone());
        }
        let netem = self
            .netems
            .lock()
            .entry(from.clone())
            .or_insert_with(|| Arc::new(Netem::new(from.clone(), self.topology.clone())))
            .clone();
        let client = Arc::new(RpcClient::new(addr, Some(to.clone()), netem));
        clients.insert((from, to), client.clone());
        Ok(client)
    }

    pub fn invoker(&self, from: &str, to: &str) -> Result<Invoker> {
        Ok(Invoker { rpc: self.rpc(from, to)? })
    }

    /// Waits until no daemon has replication updates in flight.
    pub async fn quiesce(&self, limit: std::time::Duration) -> bool {
        let deadline = tokio::time::Instant::now() + limit;
        while tokio::time::Instant::now() < deadline {
            if self.nodes.values().all(|n| n.replicator().outstanding() == 0) {
                return true;
            }
            tokio::time::sleep(std::time::Duration::from_millis(5)).await;
        }
        false
    }

    pub async fn shutdown(&self) {
        for node in self.nodes.values() {
            node.shutdown().await;
        }
        self.naming.shutdown();
    }
}

/// Invokes functions on one daemon the way an external client would.
#[derive(Clone)]
pub struct Invoker {
    rpc: Arc<RpcClient>,
}

impl Invoker {
    pub async fn invoke(&self, function: &str, input: impl Into<Bytes>) -> Result<Bytes> {
        let req = Request::Invoke {
            function: function.to_owned(),
            mode: InvokeMode::Sync,
            depth: 0,
        };
        match self.rpc.call(&req, &[input.into()]).await? {
            (Response::Output, blobs) => Ok(first_blob(blobs)),
            (other, _) => Err(EnokiError::internal(format!("unexpected reply {other:?}"))),
        }
    }
}
