//! The node daemon: store, replication, sessions and the function runtime
//! behind an HTTP API and the internal RPC listener.

pub mod http;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Weak};
use std::time::Duration;

use async_trait::async_trait;
use bytes::Bytes;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;
use tokio::sync::Notify;

use crate::error::{EnokiError, ErrorKind, Result};
use crate::ids::{KeygroupName, NodeId};
use crate::kvstore::KvStore;
use crate::naming::NamingClient;
use crate::netem::{Netem, PeerPool, RpcService, Role, Topology};
use crate::proto::{entries_reply, entry_reply, first_blob, unexpected, InvokeMode, Request, Response};
use crate::replication::Replicator;
use crate::runtime::{DeploymentResult, FunctionSpec, Platform, Runtime};
use crate::session::{version_reply, KvEndpoint, LocalEndpoint, RemoteEndpoint};

pub const NAMING_ATTEMPTS: u32 = 10;
pub const NAMING_BACKOFF: Duration = Duration::from_millis(500);
pub const DRAIN_LIMIT: Duration = Duration::from_secs(5);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeConfig {
    pub id: NodeId,
    pub listen_http: String,
    pub listen_rpc: String,
    pub naming_addr: String,
    pub topology_path: PathBuf,
    pub role: Role,
}

impl NodeConfig {
    pub fn load(path: impl AsRef<std::path::Path>) -> Result<NodeConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| EnokiError::bad_request(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| EnokiError::bad_request(format!("invalid node config {}: {e}", path.display())))
    }

    pub fn validate(&self, topology: &Topology) -> Result<()> {
        if self.role == Role::Client {
            return Err(EnokiError::bad_request("a node must be an edge or cloud node"));
        }
        if self.listen_http == self.listen_rpc {
            return Err(EnokiError::bad_request(format!(
                "HTTP and RPC listeners share {}",
                self.listen_http
            )));
        }
        if topology.node(&self.id).is_none() {
            return Err(EnokiError::bad_request(format!("node {} missing from topology", self.id)));
        }
        Ok(())
    }
}

async fn bind(addr: &str) -> Result<TcpListener> {
    TcpListener::bind(addr)
        .await
        .map_err(|e| EnokiError::bad_request(format!("cannot listen on {addr}: {e}")))
}

pub struct Node {
    id: NodeId,
    role: Role,
    store: Arc<KvStore>,
    pool: Arc<PeerPool>,
    naming: Arc<NamingClient>,
    replicator: Arc<Replicator>,
    runtime: Arc<Runtime>,
    local: Arc<LocalEndpoint>,
    rpc_addr: SocketAddr,
    http_addr: SocketAddr,
    tasks: Mutex<Vec<tokio::task::JoinHandle<()>>>,
    stop_http: Arc<Notify>,
}

impl Node {
    /// Starts a node from a config file's settings.
    pub async fn start(config: NodeConfig) -> Result<Arc<Node>> {
        let topology = Topology::load(&config.topology_path)?;
        config.validate(&topology)?;
        let rpc = bind(&config.listen_rpc).await?;
        let http = bind(&config.listen_http).await?;
        Self::start_with(config, topology, rpc, http).await
    }

    /// Starts a node on already bound listeners.
    pub async fn start_with(
        config: NodeConfig,
        topology: Topology,
        rpc: TcpListener,
        http: TcpListener,
    ) -> Result<Arc<Node>> {
        config.validate(&topology)?;
        let rpc_addr = rpc.local_addr()?;
        let http_addr = http.local_addr()?;
        let naming = Arc::new(NamingClient::new(config.naming_addr.clone()));
        register(&naming, &config.id, &rpc_addr.to_string()).await?;

        let netem = Arc::new(Netem::new(config.id.clone(), Arc::new(topology)));
        let pool = Arc::new(PeerPool::new(netem.clone()));
        pool.learn(&config.id, &rpc_addr.to_string());
        let store = Arc::new(KvStore::new(config.id.clone()));
        let replicator = Replicator::new(store.clone(), pool.clone(), naming.clone());
        let local = Arc::new(LocalEndpoint::new(store.clone(), Some(replicator.clone())));

        let node = Arc::new_cyclic(|me: &Weak<Node>| {
            let platform: Weak<dyn Platform> = me.clone();
            Node {
                id: config.id.clone(),
                role: config.role,
                runtime: Runtime::new(config.id.clone(), platform),
                store,
                pool,
                naming,
                replicator,
                local,
                rpc_addr,
                http_addr,
                tasks: Mutex::new(Vec::new()),
                stop_http: Arc::new(Notify::new()),
            }
        });

        let service: Arc<dyn RpcService> = node.clone();
        let rpc_task = tokio::spawn(crate::netem::rpc::serve(rpc, service, netem));
        let http_task = tokio::spawn(http::serve(http, node.clone(), node.stop_http.clone()));
        node.tasks.lock().extend([rpc_task, http_task]);
        log::info!(
            "node {} ({}) ready: http {} rpc {} naming {}",
            node.id,
            node.role,
            http_addr,
            rpc_addr,
            config.naming_addr
        );
        Ok(node)
    }

    pub fn id(&self) -> &NodeId {
        &self.id
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn rpc_addr(&self) -> SocketAddr {
        self.rpc_addr
    }

    pub fn http_addr(&self) -> SocketAddr {
        self.http_addr
    }

    pub fn store(&self) -> &Arc<KvStore> {
        &self.store
    }

    pub fn replicator(&self) -> &Arc<Replicator> {
        &self.replicator
    }

    pub fn runtime(&self) -> &Arc<Runtime> {
        &self.runtime
    }

    /// Session endpoint over this node's own replicas.
    pub fn endpoint(&self) -> Arc<dyn KvEndpoint> {
        self.local.clone()
    }

    pub fn pool(&self) -> &Arc<PeerPool> {
        &self.pool
    }

    pub async fn deploy(&self, spec: FunctionSpec) -> Result<DeploymentResult> {
        self.runtime.deploy(spec).await
    }

    pub async fn invoke(&self, function: &str, input: Bytes, mode: InvokeMode) -> Result<Option<Bytes>> {
        self.runtime.invoke(function, input, mode, 0).await
    }

    /// Stops accepting work, lets queued invocations finish for up to five
    /// seconds, then tears everything down.
    pub async fn shutdown(&self) {
        self.stop_http.notify_one();
        if !self.runtime.drain(DRAIN_LIMIT).await {
            log::warn!("node {}: invocations still running at shutdown", self.id);
        }
        for t in self.tasks.lock().drain(..) {
            t.abort();
        }
        self.replicator.shutdown();
        log::info!("node {} stopped", self.id);
    }

    async fn address_of(&self, node: &NodeId) -> Result<String> {
        if let Some(addr) = self.pool.address(node) {
            return Ok(addr);
        }
        let record = self.naming.lookup_node(node).await?;
        self.pool.learn(node, &record.address);
        Ok(record.address)
    }

    async fn dispatch(&self, req: Request, blobs: Vec<Bytes>) -> Result<(Response, Vec<Bytes>)> {
        Ok(match req {
            Request::Ping => (Response::Pong, Vec::new()),
            Request::FetchKeygroup { keygroup } => {
                let entries = self.store.keygroup(&keygroup)?.snapshot().into_values().collect();
                entries_reply(entries)
            }
            Request::AddPeer { keygroup, node, address } => {
                self.replicator.add_peer(&keygroup, node, &address)?;
                (Response::Ack, Vec::new())
            }
            Request::Update { keygroup, entry } => {
                let outcome = self.replicator.apply_update(&keygroup, entry.join(first_blob(blobs)))?;
                (Response::Applied { outcome }, Vec::new())
            }
            Request::SessionGet { keygroup, key, min } => {
                entry_reply(Some(self.local.get(&keygroup, &key, &min).await?))
            }
            Request::SessionSet { keygroup, key, base } => {
                let version = self.local.set(&keygroup, &key, first_blob(blobs), &base).await?;
                version_reply(&key, version, self.id.clone())
            }
            Request::SessionDelete { keygroup, key, base } => {
                let version = self.local.delete(&keygroup, &key, &base).await?;
                version_reply(&key, version, self.id.clone())
            }
            Request::SessionScan { keygroup, start, count, min } => {
                entries_reply(self.local.scan(&keygroup, &start, count, &min).await?)
            }
            Request::RawGet { keygroup, key } => entry_reply(self.store.get_raw(&keygroup, &key)?),
            Request::Invoke { function, mode, depth } => {
                match self.runtime.invoke(&function, first_blob(blobs), mode, depth).await? {
                    Some(out) => (Response::Output, vec![out]),
                    None => (Response::Accepted, Vec::new()),
                }
            }
            other => {
                return Err(EnokiError::bad_request(format!("node does not handle {}", other.kind())));
            }
        })
    }
}

/// Registers with the naming service, retrying while it is unreachable.
async fn register(naming: &NamingClient, id: &NodeId, address: &str) -> Result<()> {
    let mut last = None;
    for attempt in 1..=NAMING_ATTEMPTS {
        match naming.register_node(id, address).await {
            Ok(()) => return Ok(()),
            Err(e) if e.is(ErrorKind::Unavailable) || e.is(ErrorKind::Timeout) => {
                log::warn!("naming service at {} unreachable (attempt {attempt}): {e}", naming.addr());
                last = Some(e);
            }
            Err(e) => return Err(e),
        }
        if attempt < NAMING_ATTEMPTS {
            tokio::time::sleep(NAMING_BACKOFF).await;
        }
    }
    Err(EnokiError::unavailable(format!(
        "naming service unreachable after {NAMING_ATTEMPTS} attempts: {}",
        last.map(|e| e.detail).unwrap_or_default()
    )))
}

#[async_trait]
impl RpcService for Node {
    async fn handle(&self, _from: Option<NodeId>, req: Request, blobs: Vec<Bytes>) -> (Response, Vec<Bytes>) {
        match self.dispatch(req, blobs).await {
            Ok(reply) => reply,
            Err(e) => (Response::error(&e), Vec::new()),
        }
    }
}

#[async_trait]
impl Platform for Node {
    async fn prepare_keygroup(
        &self,
        kg: &KeygroupName,
        replicate_from_existing: bool,
    ) -> Result<(DeploymentResult, Arc<dyn KvEndpoint>)> {
        let record = match self.naming.lookup_keygroup(kg).await {
            Ok(record) => Some(record),
            Err(e) if e.is(ErrorKind::NotFound) => None,
            Err(e) => return Err(e),
        };
        let local: Arc<dyn KvEndpoint> = self.local.clone();
        let Some(record) = record else {
            if !self.store.has_keygroup(kg) {
                self.store.create_keygroup(kg)?;
            }
            match self.naming.create_keygroup(kg, &self.id).await {
                Ok(_) => {}
                Err(e) if e.is(ErrorKind::AlreadyExists) => {
                    // Lost a creation race; take the existing keygroup instead.
                    self.store.drop_keygroup(kg);
                    return self.prepare_keygroup(kg, replicate_from_existing).await;
                }
                Err(e) => {
                    self.store.drop_keygroup(kg);
                    return Err(e);
                }
            }
            self.replicator.track_new(kg);
            let result = DeploymentResult {
                created_keygroup: true,
                ..Default::default()
            };
            return Ok((result, local));
        };
        if record.replicas.contains(&self.id) && self.store.has_keygroup(kg) {
            return Ok((DeploymentResult::default(), local));
        }
        let source = record
            .replicas
            .iter()
            .find(|n| **n != self.id)
            .cloned()
            .ok_or_else(|| EnokiError::unavailable(format!("no reachable replica of {kg}")))?;
        if replicate_from_existing {
            self.replicator.bootstrap_keygroup(kg, &source).await?;
            let result = DeploymentResult {
                replicated_from: Some(source),
                ..Default::default()
            };
            return Ok((result, local));
        }
        self.address_of(&source).await?;
        let remote = Arc::new(RemoteEndpoint::new(self.pool.client(&source)?));
        let result = DeploymentResult {
            remote_store: Some(source),
            ..Default::default()
        };
        Ok((result, remote))
    }

    async fn remote_invoke(
        &self,
        node: &NodeId,
        function: &str,
        input: Bytes,
        mode: InvokeMode,
        depth: u32,
    ) -> Result<Option<Bytes>> {
        self.address_of(node).await?;
        let req = Request::Invoke {
            function: function.to_owned(),
            mode,
            depth,
        };
        match self.pool.client(node)?.call(&req, &[input]).await? {
            (Response::Output, blobs) => Ok(Some(first_blob(blobs))),
            (Response::Accepted, _) => Ok(None),
            (other, _) => Err(unexpected(other)),
        }
    }
}
