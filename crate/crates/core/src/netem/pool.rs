use std::collections::HashMap;
use std::sync::Arc;

use parking_lot::Mutex;

use super::rpc::RpcClient;
use super::shaper::Netem;
use crate::error::{EnokiError, Result};
use crate::ids::NodeId;

/// Shared, lazily connected RPC clients to peer nodes, keyed by node id.
pub struct PeerPool {
    netem: Arc<Netem>,
    addrs: Mutex<HashMap<NodeId, String>>,
    clients: Mutex<HashMap<NodeId, Arc<RpcClient>>>,
}

impl PeerPool {
    /// Seeds known addresses from the topology file.
    pub fn new(netem: Arc<Netem>) -> PeerPool {
        let addrs = netem
            .topology()
            .nodes
            .iter()
            .filter(|n| !n.addr.is_empty())
            .map(|n| (n.id.clone(), n.addr.clone()))
            .collect();
        PeerPool {
            netem,
            addrs: Mutex::new(addrs),
            clients: Mutex::new(HashMap::new()),
        }
    }

    pub fn netem(&self) -> &Arc<Netem> {
        &self.netem
    }

    /// Records `addr` for `node`, replacing any client built for an old address.
    pub fn learn(&self, node: &NodeId, addr: &str) {
        let mut addrs = self.addrs.lock();
        if addrs.get(node).map(String::as_str) != Some(addr) {
            addrs.insert(node.clone(), addr.to_owned());
            self.clients.lock().remove(node);
        }
    }

    pub fn address(&self, node: &NodeId) -> Option<String> {
        self.addrs.lock().get(node).cloned()
    }

    pub fn client(&self, node: &NodeId) -> Result<Arc<RpcClient>> {
        if let Some(c) = self.clients.lock().get(node) {
            return Ok(c.clone());
        }
        let addr = self
            .address(node)
            .ok_or_else(|| EnokiError::unavailable(format!("no address known for node {node}")))?;
        let client = Arc::new(RpcClient::new(addr, Some(node.clone()), self.netem.clone()));
        Ok(self
            .clients
            .lock()
            .entry(node.clone())
            .or_insert(client)
            .clone())
    }
}
