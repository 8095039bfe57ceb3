//! Client-centric consistency on top of keygroup access.
//!
//! A [`Session`] remembers the highest version it has written or read for
//! each key and refuses to hand back anything older. The contacted replica
//! enforces this by polling its local copy until it catches up.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use bytes::Bytes;
use parking_lot::Mutex;

use crate::clock::Timestamp;
use crate::error::{EnokiError, Result};
use crate::ids::KeygroupName;
use crate::kvstore::{Entry, KvStore};
use crate::netem::RpcClient;
use crate::proto::{join_entries, unexpected, EntryMeta, Request, Response};
use crate::replication::Replicator;
use crate::version::VersionVector;

pub const FRESHNESS_POLL: Duration = Duration::from_millis(5);
pub const FRESHNESS_DEADLINE: Duration = Duration::from_secs(1);

/// Keygroup access as seen by a session: a local store or a remote node.
#[async_trait]
pub trait KvEndpoint: Send + Sync {
    /// Live entry whose version covers `min`.
    async fn get(&self, kg: &KeygroupName, key: &str, min: &VersionVector) -> Result<Entry>;
    /// Stores `value`; returns the stored version.
    async fn set(&self, kg: &KeygroupName, key: &str, value: Bytes, base: &VersionVector) -> Result<VersionVector>;
    async fn delete(&self, kg: &KeygroupName, key: &str, base: &VersionVector) -> Result<VersionVector>;
    async fn scan(
        &self,
        kg: &KeygroupName,
        start: &str,
        count: usize,
        min: &BTreeMap<String, VersionVector>,
    ) -> Result<Vec<Entry>>;
    /// Stored entry without any freshness check.
    async fn raw_get(&self, kg: &KeygroupName, key: &str) -> Result<Option<Entry>>;
}

fn covers(entry: Option<&Entry>, min: &VersionVector) -> bool {
    match entry {
        Some(e) => e.version.dominates_or_equals(min),
        None => min.is_empty(),
    }
}

/// Polls `attempt` until it yields a value or the deadline passes.
async fn wait_fresh<T>(mut attempt: impl FnMut() -> Result<Option<T>>) -> Result<T> {
    let deadline = Instant::now() + FRESHNESS_DEADLINE;
    loop {
        if let Some(v) = attempt()? {
            return Ok(v);
        }
        if Instant::now() + FRESHNESS_POLL > deadline {
            return Err(EnokiError::timeout("replica did not catch up with session"));
        }
        tokio::time::sleep(FRESHNESS_POLL).await;
    }
}

/// Serves sessions from this node's replica.
#[derive(Clone)]
pub struct LocalEndpoint {
    store: Arc<KvStore>,
    replicator: Option<Arc<Replicator>>,
}

impl LocalEndpoint {
    pub fn new(store: Arc<KvStore>, replicator: Option<Arc<Replicator>>) -> LocalEndpoint {
        LocalEndpoint { store, replicator }
    }

    fn fan_out(&self, kg: &KeygroupName, entry: &Entry) {
        if let Some(r) = &self.replicator {
            r.propagate(kg, entry);
        }
    }
}

#[async_trait]
impl KvEndpoint for LocalEndpoint {
    async fn get(&self, kg: &KeygroupName, key: &str, min: &VersionVector) -> Result<Entry> {
        let found = wait_fresh(|| {
            let raw = self.store.get_raw(kg, key)?;
            Ok(covers(raw.as_ref(), min).then_some(raw))
        })
        .await?;
        match found {
            Some(e) if !e.tombstone => Ok(e),
            _ => Err(EnokiError::not_found(format!("key {key:?} in {kg}"))),
        }
    }

    async fn set(&self, kg: &KeygroupName, key: &str, value: Bytes, base: &VersionVector) -> Result<VersionVector> {
        let entry = self.store.put_local(kg, key, value, base)?;
        self.fan_out(kg, &entry);
        Ok(entry.version)
    }

    async fn delete(&self, kg: &KeygroupName, key: &str, base: &VersionVector) -> Result<VersionVector> {
        let entry = self.store.delete_with_base(kg, key, base)?;
        self.fan_out(kg, &entry);
        Ok(entry.version)
    }

    async fn scan(
        &self,
        kg: &KeygroupName,
        start: &str,
        count: usize,
        min: &BTreeMap<String, VersionVector>,
    ) -> Result<Vec<Entry>> {
        wait_fresh(|| {
            let entries = self.store.scan_local(kg, start, count)?;
            let full = entries.len() == count;
            let last = entries.last().map(|e| e.key.clone());
            for (key, want) in min.range::<str, _>((std::ops::Bound::Included(start), std::ops::Bound::Unbounded)) {
                if full && last.as_deref().is_some_and(|l| key.as_str() > l) {
                    break;
                }
                if !covers(self.store.get_raw(kg, key)?.as_ref(), want) {
                    return Ok(None);
                }
            }
            Ok(Some(entries))
        })
        .await
    }

    async fn raw_get(&self, kg: &KeygroupName, key: &str) -> Result<Option<Entry>> {
        self.store.get_raw(kg, key)
    }
}

/// Reaches a replica on another node over RPC.
#[derive(Clone)]
pub struct RemoteEndpoint {
    client: Arc<RpcClient>,
}

impl RemoteEndpoint {
    pub fn new(client: Arc<RpcClient>) -> RemoteEndpoint {
        RemoteEndpoint { client }
    }

    async fn entry_call(&self, req: &Request, blobs: &[Bytes]) -> Result<Option<Entry>> {
        match self.client.call(req, blobs).await? {
            (Response::Entry { entry: Some(meta) }, blobs) => {
                Ok(Some(meta.join(blobs.into_iter().next().unwrap_or_default())))
            }
            (Response::Entry { entry: None }, _) => Ok(None),
            (other, _) => Err(unexpected(other)),
        }
    }

    async fn version_call(&self, req: &Request, blobs: &[Bytes]) -> Result<VersionVector> {
        self.entry_call(req, blobs)
            .await?
            .map(|e| e.version)
            .ok_or_else(|| EnokiError::internal("write reply without version"))
    }
}

#[async_trait]
impl KvEndpoint for RemoteEndpoint {
    async fn get(&self, kg: &KeygroupName, key: &str, min: &VersionVector) -> Result<Entry> {
        let req = Request::SessionGet {
            keygroup: kg.clone(),
            key: key.to_owned(),
            min: min.clone(),
        };
        self.entry_call(&req, &[])
            .await?
            .ok_or_else(|| EnokiError::not_found(format!("key {key:?} in {kg}")))
    }

    async fn set(&self, kg: &KeygroupName, key: &str, value: Bytes, base: &VersionVector) -> Result<VersionVector> {
        let req = Request::SessionSet {
            keygroup: kg.clone(),
            key: key.to_owned(),
            base: base.clone(),
        };
        self.version_call(&req, &[value]).await
    }

    async fn delete(&self, kg: &KeygroupName, key: &str, base: &VersionVector) -> Result<VersionVector> {
        let req = Request::SessionDelete {
            keygroup: kg.clone(),
            key: key.to_owned(),
            base: base.clone(),
        };
        self.version_call(&req, &[]).await
    }

    async fn scan(
        &self,
        kg: &KeygroupName,
        start: &str,
        count: usize,
        min: &BTreeMap<String, VersionVector>,
    ) -> Result<Vec<Entry>> {
        let req = Request::SessionScan {
            keygroup: kg.clone(),
            start: start.to_owned(),
            count,
            min: min.clone(),
        };
        match self.client.call(&req, &[]).await? {
            (Response::Entries { entries }, blobs) => join_entries(entries, blobs),
            (other, _) => Err(unexpected(other)),
        }
    }

    async fn raw_get(&self, kg: &KeygroupName, key: &str) -> Result<Option<Entry>> {
        let req = Request::RawGet {
            keygroup: kg.clone(),
            key: key.to_owned(),
        };
        self.entry_call(&req, &[]).await
    }
}

/// Reply for a session write: the stored version with an empty value.
pub fn version_reply(key: &str, version: VersionVector, writer: crate::ids::NodeId) -> (Response, Vec<Bytes>) {
    let meta = EntryMeta {
        key: key.to_owned(),
        version,
        writer,
        write_ts: Timestamp::now(),
        tombstone: false,
        rank: 0,
    };
    (Response::Entry { entry: Some(meta) }, vec![Bytes::new()])
}

static NEXT_SESSION: AtomicU64 = AtomicU64::new(1);

/// One client's view of a keygroup.
pub struct Session {
    id: u64,
    keygroup: KeygroupName,
    endpoint: Mutex<Arc<dyn KvEndpoint>>,
    high_water: Mutex<HashMap<String, VersionVector>>,
}

impl Session {
    pub fn new(keygroup: KeygroupName, endpoint: Arc<dyn KvEndpoint>) -> Session {
        Session {
            id: NEXT_SESSION.fetch_add(1, Ordering::Relaxed),
            keygroup,
            endpoint: Mutex::new(endpoint),
            high_water: Mutex::new(HashMap::new()),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn keygroup(&self) -> &KeygroupName {
        &self.keygroup
    }

    /// Points the session at another replica; the guarantees carry over.
    pub fn rebind(&self, endpoint: Arc<dyn KvEndpoint>) {
        *self.endpoint.lock() = endpoint;
    }

    pub fn high_water(&self, key: &str) -> VersionVector {
        self.high_water.lock().get(key).cloned().unwrap_or_default()
    }

    fn endpoint(&self) -> Arc<dyn KvEndpoint> {
        self.endpoint.lock().clone()
    }

    fn observe(&self, key: &str, version: &VersionVector) {
        self.high_water
            .lock()
            .entry(key.to_owned())
            .or_default()
            .merge_in(version);
    }

    pub async fn get(&self, key: &str) -> Result<Bytes> {
        let min = self.high_water(key);
        let entry = self.endpoint().get(&self.keygroup, key, &min).await?;
        self.observe(key, &entry.version);
        Ok(entry.value)
    }

    pub async fn set(&self, key: &str, value: impl Into<Bytes>) -> Result<()> {
        let base = self.high_water(key);
        let version = self.endpoint().set(&self.keygroup, key, value.into(), &base).await?;
        self.observe(key, &version);
        Ok(())
    }

    pub async fn delete(&self, key: &str) -> Result<()> {
        let base = self.high_water(key);
        let version = self.endpoint().delete(&self.keygroup, key, &base).await?;
        self.observe(key, &version);
        Ok(())
    }

    pub async fn scan(&self, start: &str, count: usize) -> Result<Vec<(String, Bytes)>> {
        let min: BTreeMap<String, VersionVector> = self
            .high_water
            .lock()
            .iter()
            .filter(|(k, _)| k.as_str() >= start)
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let entries = self.endpoint().scan(&self.keygroup, start, count, &min).await?;
        Ok(entries
            .into_iter()
            .map(|e| {
                self.observe(&e.key, &e.version);
                (e.key, e.value)
            })
            .collect())
    }

    /// Reads the contacted replica directly, bypassing the session guarantee.
    pub async fn raw_get(&self, key: &str) -> Result<Option<Entry>> {
        self.endpoint().raw_get(&self.keygroup, key).await
    }
}

/// Encodes a staleness probe value as `seq|micros`.
pub fn encode_probe(seq: u64, ts: Timestamp) -> Bytes {
    Bytes::from(format!("{seq}|{}", ts.micros()))
}

pub fn decode_probe(raw: &[u8]) -> Result<(u64, Timestamp)> {
    let bad = || EnokiError::bad_request(format!("malformed probe value {:?}", String::from_utf8_lossy(raw)));
    let text = std::str::from_utf8(raw).map_err(|_| bad())?;
    let (seq, micros) = text.split_once('|').ok_or_else(bad)?;
    Ok((
        seq.parse().map_err(|_| bad())?,
        Timestamp(micros.parse().map_err(|_| bad())?),
    ))
}

/// Write and read times of a single-client staleness probe.
#[derive(Debug, Default, Clone)]
pub struct StalenessProbeLog {
    writes: BTreeMap<u64, Timestamp>,
    reads: Vec<(Timestamp, u64)>,
}

impl StalenessProbeLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records that write `seq` was issued at `ts`. Sequence numbers must
    /// increase along with their timestamps.
    pub fn record_probe_write(&mut self, seq: u64, ts: Timestamp) -> Result<()> {
        if let Some((&last, &last_ts)) = self.writes.last_key_value() {
            if seq <= last || ts < last_ts {
                return Err(EnokiError::bad_request(format!(
                    "probe write {seq} at {ts:?} does not follow {last} at {last_ts:?}"
                )));
            }
        }
        self.writes.insert(seq, ts);
        Ok(())
    }

    pub fn record_probe_read(&mut self, read_ts: Timestamp, observed_seq: u64) {
        self.reads.push((read_ts, observed_seq));
    }

    pub fn writes(&self) -> usize {
        self.writes.len()
    }

    pub fn reads(&self) -> usize {
        self.reads.len()
    }

    /// Staleness of one read issued at `read_ts` that observed `seq`:
    /// time since the earliest write that superseded it, counting only
    /// writes issued before the read. `None` when the read was fresh.
    pub fn staleness_of(&self, read_ts: Timestamp, seq: u64) -> Result<Option<Duration>> {
        if !self.writes.contains_key(&seq) {
            return Err(EnokiError::bad_request(format!("read observed unknown probe seq {seq}")));
        }
        Ok(self
            .writes
            .range(seq + 1..)
            .next()
            .filter(|(_, &ts)| ts <= read_ts)
            .map(|(_, &ts)| read_ts.saturating_sub(ts)))
    }

    /// Staleness of every stale read recorded so far.
    pub fn compute_staleness(&self) -> Result<Vec<Duration>> {
        let mut out = Vec::new();
        for &(read_ts, seq) in &self.reads {
            out.extend(self.staleness_of(read_ts, seq)?);
        }
        Ok(out)
    }
}
