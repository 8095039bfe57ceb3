//! Keygroup replication.
//!
//! A node that deploys a function whose keygroup already lives elsewhere
//! bootstraps a full copy from an existing replica. After that every local
//! write is pushed asynchronously to all peer replicas. Each peer has one
//! FIFO outbound queue drained by a background worker; failed deliveries are
//! retried with backoff and eventually dropped.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Mutex, RwLock};
use tokio::sync::{Notify, Semaphore};

use crate::clock::Timestamp;
use crate::error::{EnokiError, ErrorKind, Result};
use crate::ids::{KeygroupName, NodeId};
use crate::kvstore::{ApplyOutcome, Entry, KvStore};
use crate::naming::NamingClient;
use crate::netem::PeerPool;
use crate::proto::{join_entries, unexpected, EntryMeta, Request, Response};

pub const QUEUE_CAPACITY: usize = 10_000;
/// Delays before each retry of a failed delivery.
pub const RETRY_BACKOFF: [Duration; 3] = [
    Duration::from_millis(50),
    Duration::from_millis(200),
    Duration::from_millis(800),
];
const WINDOW: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplicaSet {
    pub keygroup: KeygroupName,
    /// Peer replicas with their RPC addresses; never contains this node.
    pub peers: Vec<(NodeId, String)>,
    pub fetched_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UpdateMsg {
    pub keygroup: KeygroupName,
    pub entry: Entry,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeliveryStatus {
    Queued,
    /// Queue was full; an older update was dropped to make room.
    QueuedWithCompaction,
}

struct PeerQueue {
    items: Mutex<VecDeque<UpdateMsg>>,
    ready: Notify,
}

impl PeerQueue {
    fn push(&self, msg: UpdateMsg) -> DeliveryStatus {
        let mut items = self.items.lock();
        let mut status = DeliveryStatus::Queued;
        if items.len() >= QUEUE_CAPACITY {
            // Newest wins: drop the oldest queued update for the same key,
            // or the oldest update overall when the key is not queued.
            let same_key = items
                .iter()
                .position(|m| m.keygroup == msg.keygroup && m.entry.key == msg.entry.key);
            items.remove(same_key.unwrap_or(0));
            status = DeliveryStatus::QueuedWithCompaction;
        }
        items.push_back(msg);
        drop(items);
        self.ready.notify_one();
        status
    }

    async fn pop(&self) -> UpdateMsg {
        loop {
            if let Some(msg) = self.items.lock().pop_front() {
                return msg;
            }
            self.ready.notified().await;
        }
    }
}

#[derive(Debug, Default)]
pub struct ReplicationStats {
    pub queued: AtomicU64,
    pub delivered: AtomicU64,
    pub dropped: AtomicU64,
}

pub struct Replicator {
    me: NodeId,
    store: Arc<KvStore>,
    pool: Arc<PeerPool>,
    naming: Arc<NamingClient>,
    sets: RwLock<HashMap<KeygroupName, ReplicaSet>>,
    queues: Mutex<HashMap<NodeId, Arc<PeerQueue>>>,
    workers: Mutex<Vec<tokio::task::JoinHandle<()>>>,
    stats: Arc<ReplicationStats>,
}

impl Replicator {
    pub fn new(store: Arc<KvStore>, pool: Arc<PeerPool>, naming: Arc<NamingClient>) -> Arc<Replicator> {
        Arc::new(Replicator {
            me: store.node().clone(),
            store,
            pool,
            naming,
            sets: RwLock::new(HashMap::new()),
            queues: Mutex::new(HashMap::new()),
            workers: Mutex::new(Vec::new()),
            stats: Arc::new(ReplicationStats::default()),
        })
    }

    pub fn stats(&self) -> &ReplicationStats {
        &self.stats
    }

    /// Updates accepted for fan-out that are neither delivered nor dropped.
    pub fn outstanding(&self) -> u64 {
        let s = &self.stats;
        s.queued
            .load(Ordering::Acquire)
            .saturating_sub(s.delivered.load(Ordering::Acquire) + s.dropped.load(Ordering::Acquire))
    }

    pub fn replica_set(&self, kg: &KeygroupName) -> Option<ReplicaSet> {
        self.sets.read().get(kg).cloned()
    }

    fn install_set(&self, set: ReplicaSet) {
        if let Ok(group) = self.store.keygroup(&set.keygroup) {
            let mut replicas: BTreeSet<NodeId> = set.peers.iter().map(|(n, _)| n.clone()).collect();
            replicas.insert(self.me.clone());
            group.set_replicas(replicas);
        }
        self.sets.write().insert(set.keygroup.clone(), set);
    }

    /// Starts tracking a keygroup this node just created; it has no peers yet.
    pub fn track_new(&self, kg: &KeygroupName) {
        self.install_set(ReplicaSet {
            keygroup: kg.clone(),
            peers: Vec::new(),
            fetched_at: Timestamp::now(),
        });
    }

    /// Replaces the cached replica set with the naming service's view. On
    /// failure the old cache stays in place.
    pub async fn refresh_replicas(&self, kg: &KeygroupName) -> Result<ReplicaSet> {
        let record = self.naming.lookup_keygroup(kg).await?;
        let mut peers = Vec::new();
        for node in record.replicas.iter().filter(|n| **n != self.me) {
            let rec = self.naming.lookup_node(node).await?;
            self.pool.learn(node, &rec.address);
            peers.push((node.clone(), rec.address));
        }
        let set = ReplicaSet {
            keygroup: kg.clone(),
            peers,
            fetched_at: Timestamp::now(),
        };
        self.install_set(set.clone());
        Ok(set)
    }

    /// Adds a peer announced by a newly bootstrapping replica.
    pub fn add_peer(&self, kg: &KeygroupName, node: NodeId, address: &str) -> Result<()> {
        if node == self.me {
            return Ok(());
        }
        let group = self.store.keygroup(kg)?;
        self.pool.learn(&node, address);
        group.add_replica(node.clone());
        let mut sets = self.sets.write();
        let set = sets.entry(kg.clone()).or_insert_with(|| ReplicaSet {
            keygroup: kg.clone(),
            peers: Vec::new(),
            fetched_at: Timestamp::now(),
        });
        if let Some(slot) = set.peers.iter_mut().find(|(n, _)| *n == node) {
            slot.1 = address.to_owned();
        } else {
            set.peers.push((node, address.to_owned()));
        }
        Ok(())
    }

    /// Copies a keygroup held by `from` onto this node.
    ///
    /// The local replica is registered with the naming service and announced
    /// to every existing peer before the state transfer, so writes racing
    /// with the transfer still fan out here.
    pub async fn bootstrap_keygroup(&self, kg: &KeygroupName, from: &NodeId) -> Result<usize> {
        self.store.create_keygroup(kg)?;
        match self.bootstrap_inner(kg, from).await {
            Ok(n) => Ok(n),
            Err(e) => {
                self.store.drop_keygroup(kg);
                self.sets.write().remove(kg);
                Err(e)
            }
        }
    }

    async fn bootstrap_inner(&self, kg: &KeygroupName, from: &NodeId) -> Result<usize> {
        self.naming.add_replica(kg, &self.me).await?;
        let set = self.refresh_replicas(kg).await?;
        let my_addr = self
            .pool
            .address(&self.me)
            .ok_or_else(|| EnokiError::internal("own RPC address unknown"))?;
        let announce = Request::AddPeer {
            keygroup: kg.clone(),
            node: self.me.clone(),
            address: my_addr,
        };
        let announcements = set.peers.iter().map(|(peer, _)| {
            let announce = &announce;
            async move {
                let res = async { self.pool.client(peer)?.call(announce, &[]).await }.await;
                (peer.clone(), res)
            }
        });
        for (peer, res) in futures::future::join_all(announcements).await {
            if let Err(e) = res {
                if &peer == from {
                    return Err(EnokiError::unavailable(format!("source replica {peer}: {e}")));
                }
                log::warn!("could not announce replica of {kg} to {peer}: {e}");
            }
        }

        let source = self.pool.client(from)?;
        let (resp, blobs) = source
            .call(&Request::FetchKeygroup { keygroup: kg.clone() }, &[])
            .await
            .map_err(|e| match e.kind {
                ErrorKind::NotFound => e,
                _ => EnokiError::unavailable(format!("fetch from {from}: {}", e.detail)),
            })?;
        let Response::Entries { entries } = resp else {
            return Err(unexpected(resp));
        };
        let entries = join_entries(entries, blobs)?;
        let count = entries.len();
        for entry in entries {
            self.store.apply_remote(kg, entry)?;
        }
        log::info!("bootstrapped keygroup {kg} from {from}: {count} entries");
        Ok(count)
    }

    /// Queues `entry` (already applied locally) for every peer replica.
    pub fn propagate(self: &Arc<Self>, kg: &KeygroupName, entry: &Entry) -> Vec<(NodeId, DeliveryStatus)> {
        let peers: Vec<NodeId> = match self.sets.read().get(kg) {
            Some(set) => set.peers.iter().map(|(n, _)| n.clone()).collect(),
            None => return Vec::new(),
        };
        peers
            .into_iter()
            .map(|peer| {
                let queue = self.queue_for(&peer);
                self.stats.queued.fetch_add(1, Ordering::AcqRel);
                let status = queue.push(UpdateMsg {
                    keygroup: kg.clone(),
                    entry: entry.clone(),
                });
                if status == DeliveryStatus::QueuedWithCompaction {
                    self.stats.dropped.fetch_add(1, Ordering::AcqRel);
                }
                (peer, status)
            })
            .collect()
    }

    fn queue_for(self: &Arc<Self>, peer: &NodeId) -> Arc<PeerQueue> {
        let mut queues = self.queues.lock();
        if let Some(q) = queues.get(peer) {
            return q.clone();
        }
        let queue = Arc::new(PeerQueue {
            items: Mutex::new(VecDeque::new()),
            ready: Notify::new(),
        });
        queues.insert(peer.clone(), queue.clone());
        let worker = tokio::spawn(peer_worker(Arc::downgrade(self), peer.clone(), queue.clone()));
        self.workers.lock().push(worker);
        queue
    }

    /// Applies an update pushed by a peer.
    pub fn apply_update(&self, kg: &KeygroupName, entry: Entry) -> Result<ApplyOutcome> {
        self.store.apply_remote(kg, entry)
    }

    pub fn shutdown(&self) {
        for w in self.workers.lock().drain(..) {
            w.abort();
        }
    }
}

impl Drop for Replicator {
    fn drop(&mut self) {
        self.shutdown();
    }
}

async fn peer_worker(replicator: std::sync::Weak<Replicator>, peer: NodeId, queue: Arc<PeerQueue>) {
    let window = Arc::new(Semaphore::new(WINDOW));
    loop {
        let msg = queue.pop().await;
        let Some(rep) = replicator.upgrade() else { return };
        let permit = window.clone().acquire_owned().await.expect("window semaphore open");
        let (meta, value) = EntryMeta::split(msg.entry.clone());
        let req = Request::Update {
            keygroup: msg.keygroup.clone(),
            entry: meta,
        };
        let first = match rep.pool.client(&peer) {
            Ok(client) => client.begin(&req, std::slice::from_ref(&value)).await,
            Err(e) => Err(e),
        };
        let stats = rep.stats.clone();
        let weak = replicator.clone();
        let peer = peer.clone();
        drop(rep);
        tokio::spawn(async move {
            let _permit = permit;
            let mut outcome = match first {
                Ok(pending) => pending.wait().await.and_then(|(r, _)| r.into_result()),
                Err(e) => Err(e),
            };
            for delay in RETRY_BACKOFF {
                match &outcome {
                    Ok(_) => break,
                    Err(e) if e.kind == ErrorKind::NotFound || e.kind == ErrorKind::BadRequest => break,
                    Err(_) => {}
                }
                tokio::time::sleep(delay).await;
                let Some(rep) = weak.upgrade() else { return };
                outcome = match rep.pool.client(&peer) {
                    Ok(client) => client.call(&req, std::slice::from_ref(&value)).await.map(|_| Response::Ack),
                    Err(e) => Err(e),
                };
            }
            match outcome {
                Ok(_) => {
                    stats.delivered.fetch_add(1, Ordering::AcqRel);
                }
                Err(e) => {
                    stats.dropped.fetch_add(1, Ordering::AcqRel);
                    log::warn!(
                        "dropping update {}/{} for {peer} after retries: {e}",
                        msg.keygroup,
                        msg.entry.key
                    );
                    if e.kind == ErrorKind::Unavailable {
                        if let Some(rep) = weak.upgrade() {
                            if let Err(err) = rep.refresh_replicas(&msg.keygroup).await {
                                log::warn!("replica refresh for {} failed: {err}", msg.keygroup);
                            }
                        }
                    }
                }
            }
        });
    }
}
