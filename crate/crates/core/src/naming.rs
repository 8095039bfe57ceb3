//! Central naming service: node addresses and keygroup replica sets.
//!
//! Control plane only. Nodes consult it when deploying functions and when a
//! peer becomes unreachable, never while serving reads or writes.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use bytes::Bytes;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::clock::Timestamp;
use crate::error::{EnokiError, Result};
use crate::ids::{KeygroupName, NodeId};
use crate::netem::{Netem, RpcClient, RpcService};
use crate::proto::{unexpected, Request, Response};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub id: NodeId,
    pub address: String,
    pub last_heartbeat: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeygroupRecord {
    pub name: KeygroupName,
    /// Registration order.
    pub replicas: Vec<NodeId>,
}

#[derive(Default)]
struct Registry {
    nodes: HashMap<NodeId, NodeRecord>,
    keygroups: HashMap<KeygroupName, KeygroupRecord>,
}

/// Naming state. All operations run under one lock and are linearizable.
#[derive(Default)]
pub struct NamingService {
    registry: Mutex<Registry>,
    requests: AtomicU64,
}

impl NamingService {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of RPC requests served so far (excluding pings).
    pub fn request_count(&self) -> u64 {
        self.requests.load(Ordering::Relaxed)
    }

    pub fn register_node(&self, id: NodeId, address: &str) -> Result<()> {
        if address.parse::<SocketAddr>().is_err() {
            return Err(EnokiError::bad_request(format!("malformed address {address:?}")));
        }
        let mut reg = self.registry.lock();
        reg.nodes.insert(
            id.clone(),
            NodeRecord {
                id,
                address: address.to_owned(),
                last_heartbeat: Timestamp::now(),
            },
        );
        Ok(())
    }

    pub fn create_keygroup_record(&self, name: KeygroupName, first_replica: NodeId) -> Result<KeygroupRecord> {
        let mut reg = self.registry.lock();
        if !reg.nodes.contains_key(&first_replica) {
            return Err(EnokiError::not_found(format!("node {first_replica}")));
        }
        if reg.keygroups.contains_key(&name) {
            return Err(EnokiError::already_exists(format!("keygroup {name}")));
        }
        let record = KeygroupRecord {
            name: name.clone(),
            replicas: vec![first_replica],
        };
        reg.keygroups.insert(name, record.clone());
        Ok(record)
    }

    pub fn add_replica(&self, name: &KeygroupName, node: NodeId) -> Result<KeygroupRecord> {
        let mut reg = self.registry.lock();
        if !reg.nodes.contains_key(&node) {
            return Err(EnokiError::not_found(format!("node {node}")));
        }
        let record = reg
            .keygroups
            .get_mut(name)
            .ok_or_else(|| EnokiError::not_found(format!("keygroup {name}")))?;
        if !record.replicas.contains(&node) {
            record.replicas.push(node);
        }
        Ok(record.clone())
    }

    pub fn lookup_keygroup(&self, name: &KeygroupName) -> Result<KeygroupRecord> {
        self.registry
            .lock()
            .keygroups
            .get(name)
            .cloned()
            .ok_or_else(|| EnokiError::not_found(format!("keygroup {name}")))
    }

    pub fn lookup_node(&self, id: &NodeId) -> Result<NodeRecord> {
        self.registry
            .lock()
            .nodes
            .get(id)
            .cloned()
            .ok_or_else(|| EnokiError::not_found(format!("node {id}")))
    }
}

fn reply<T>(result: Result<T>, ok: impl FnOnce(T) -> Response) -> (Response, Vec<Bytes>) {
    match result {
        Ok(v) => (ok(v), Vec::new()),
        Err(e) => (Response::error(&e), Vec::new()),
    }
}

#[async_trait]
impl RpcService for NamingService {
    async fn handle(&self, _from: Option<NodeId>, req: Request, _blobs: Vec<Bytes>) -> (Response, Vec<Bytes>) {
        if !matches!(req, Request::Ping) {
            self.requests.fetch_add(1, Ordering::Relaxed);
        }
        match req {
            Request::Ping => (Response::Pong, Vec::new()),
            Request::RegisterNode { node, address } => reply(self.register_node(node, &address), |_| Response::Ack),
            Request::LookupNode { node } => reply(self.lookup_node(&node), |record| Response::Node { record }),
            Request::CreateKeygroup { name, replica } => {
                reply(self.create_keygroup_record(name, replica), |record| Response::Keygroup { record })
            }
            Request::AddReplica { name, node } => {
                reply(self.add_replica(&name, node), |record| Response::Keygroup { record })
            }
            Request::LookupKeygroup { name } => {
                reply(self.lookup_keygroup(&name), |record| Response::Keygroup { record })
            }
            other => (
                Response::error(&EnokiError::bad_request(format!(
                    "naming service does not handle {}",
                    other.kind()
                ))),
                Vec::new(),
            ),
        }
    }
}

/// Running naming daemon.
pub struct NamingServer {
    pub service: Arc<NamingService>,
    pub addr: SocketAddr,
    task: tokio::task::JoinHandle<()>,
}

impl NamingServer {
    pub async fn start(listen: &str) -> Result<NamingServer> {
        let listener = tokio::net::TcpListener::bind(listen).await?;
        Self::with_listener(listener)
    }

    pub fn with_listener(listener: tokio::net::TcpListener) -> Result<NamingServer> {
        let addr = listener.local_addr()?;
        let service = Arc::new(NamingService::new());
        let task = tokio::spawn(crate::netem::rpc::serve(
            listener,
            service.clone(),
            Arc::new(Netem::disabled()),
        ));
        log::info!("naming service listening on {addr}");
        Ok(NamingServer { service, addr, task })
    }

    pub fn shutdown(&self) {
        self.task.abort();
    }
}

impl Drop for NamingServer {
    fn drop(&mut self) {
        self.task.abort();
    }
}

/// Client for the naming daemon. Traffic is not link-shaped.
pub struct NamingClient {
    rpc: RpcClient,
}

impl NamingClient {
    pub fn new(addr: impl Into<String>) -> NamingClient {
        NamingClient {
            rpc: RpcClient::new(addr, None, Arc::new(Netem::disabled())).with_timeout(Duration::from_secs(5)),
        }
    }

    pub fn addr(&self) -> &str {
        self.rpc.addr()
    }

    pub async fn ping(&self) -> Result<()> {
        self.rpc.ping().await
    }

    pub async fn register_node(&self, id: &NodeId, address: &str) -> Result<()> {
        let req = Request::RegisterNode {
            node: id.clone(),
            address: address.to_owned(),
        };
        match self.rpc.call(&req, &[]).await?.0 {
            Response::Ack => Ok(()),
            other => Err(unexpected(other)),
        }
    }

    pub async fn lookup_node(&self, id: &NodeId) -> Result<NodeRecord> {
        match self.rpc.call(&Request::LookupNode { node: id.clone() }, &[]).await?.0 {
            Response::Node { record } => Ok(record),
            other => Err(unexpected(other)),
        }
    }

    pub async fn create_keygroup(&self, name: &KeygroupName, replica: &NodeId) -> Result<KeygroupRecord> {
        let req = Request::CreateKeygroup {
            name: name.clone(),
            replica: replica.clone(),
        };
        self.keygroup_call(req).await
    }

    pub async fn add_replica(&self, name: &KeygroupName, node: &NodeId) -> Result<KeygroupRecord> {
        let req = Request::AddReplica {
            name: name.clone(),
            node: node.clone(),
        };
        self.keygroup_call(req).await
    }

    pub async fn lookup_keygroup(&self, name: &KeygroupName) -> Result<KeygroupRecord> {
        self.keygroup_call(Request::LookupKeygroup { name: name.clone() }).await
    }

    async fn keygroup_call(&self, req: Request) -> Result<KeygroupRecord> {
        match self.rpc.call(&req, &[]).await?.0 {
            Response::Keygroup { record } => Ok(record),
            other => Err(unexpected(other)),
        }
    }
}
