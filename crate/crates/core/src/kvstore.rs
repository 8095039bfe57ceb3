//! In-memory storage engine holding the keygroups replicated to one node.
//!
//! Every key holds a single [`Entry`]. Local writes merge the caller's base
//! version with the stored one and bump the local counter; remote entries are
//! applied by causal comparison, falling back to a deterministic winner for
//! concurrent versions. Deletes leave tombstones so they replicate like any
//! other write.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use bytes::Bytes;
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

use crate::clock::Timestamp;
use crate::error::{EnokiError, Result};
use crate::ids::{KeygroupName, NodeId};
use crate::version::{Causality, VersionVector};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub key: String,
    pub value: Bytes,
    /// Causal context: merge of every version folded into this key.
    pub version: VersionVector,
    pub writer: NodeId,
    pub write_ts: Timestamp,
    pub tombstone: bool,
    /// Counter total of the winning write's own version. Orders concurrent
    /// writes consistently with causality.
    pub rank: u64,
}

impl Entry {
    /// Total order used to pick a winner among concurrent versions:
    /// rank first, then the writer id, then the remaining fields so the
    /// choice is deterministic even for pathological inputs.
    fn precedence(&self, other: &Entry) -> Ordering {
        self.rank
            .cmp(&other.rank)
            .then_with(|| self.writer.cmp(&other.writer))
            .then_with(|| self.write_ts.cmp(&other.write_ts))
            .then_with(|| self.tombstone.cmp(&other.tombstone))
            .then_with(|| self.value.cmp(&other.value))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ApplyOutcome {
    Applied,
    Ignored,
    ConflictResolved,
}

#[derive(Debug)]
pub struct Keygroup {
    name: KeygroupName,
    entries: RwLock<BTreeMap<String, Entry>>,
    replicas: RwLock<BTreeSet<NodeId>>,
}

impl Keygroup {
    fn new(name: KeygroupName, owner: NodeId) -> Self {
        Keygroup {
            name,
            entries: RwLock::new(BTreeMap::new()),
            replicas: RwLock::new(BTreeSet::from([owner])),
        }
    }

    pub fn name(&self) -> &KeygroupName {
        &self.name
    }

    pub fn replicas(&self) -> BTreeSet<NodeId> {
        self.replicas.read().clone()
    }

    pub fn set_replicas(&self, replicas: BTreeSet<NodeId>) {
        *self.replicas.write() = replicas;
    }

    pub fn add_replica(&self, node: NodeId) {
        self.replicas.write().insert(node);
    }

    pub fn len(&self) -> usize {
        self.entries.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Point-in-time copy of every entry, tombstones included.
    pub fn snapshot(&self) -> BTreeMap<String, Entry> {
        self.entries.read().clone()
    }
}

/// All keygroups held by one node.
#[derive(Debug)]
pub struct KvStore {
    node: NodeId,
    keygroups: RwLock<HashMap<KeygroupName, Arc<Keygroup>>>,
}

impl KvStore {
    pub fn new(node: NodeId) -> Self {
        KvStore {
            node,
            keygroups: RwLock::new(HashMap::new()),
        }
    }

    pub fn node(&self) -> &NodeId {
        &self.node
    }

    pub fn create_keygroup(&self, name: &KeygroupName) -> Result<Arc<Keygroup>> {
        let mut groups = self.keygroups.write();
        if groups.contains_key(name) {
            return Err(EnokiError::already_exists(format!("keygroup {name}")));
        }
        let kg = Arc::new(Keygroup::new(name.clone(), self.node.clone()));
        groups.insert(name.clone(), kg.clone());
        Ok(kg)
    }

    pub fn keygroup(&self, name: &KeygroupName) -> Result<Arc<Keygroup>> {
        self.keygroups
            .read()
            .get(name)
            .cloned()
            .ok_or_else(|| EnokiError::not_found(format!("keygroup {name}")))
    }

    pub fn drop_keygroup(&self, name: &KeygroupName) {
        self.keygroups.write().remove(name);
    }

    pub fn has_keygroup(&self, name: &KeygroupName) -> bool {
        self.keygroups.read().contains_key(name)
    }

    pub fn put_local(
        &self,
        kg: &KeygroupName,
        key: &str,
        value: Bytes,
        base: &VersionVector,
    ) -> Result<Entry> {
        self.write_local(kg, key, value, base, false)
    }

    /// Tombstones `key`. Fails with `NotFound` when the key is absent or
    /// already deleted.
    pub fn delete_local(&self, kg: &KeygroupName, key: &str) -> Result<Entry> {
        self.delete_with_base(kg, key, &VersionVector::new())
    }

    pub fn delete_with_base(
        &self,
        kg: &KeygroupName,
        key: &str,
        base: &VersionVector,
    ) -> Result<Entry> {
        self.write_local(kg, key, Bytes::new(), base, true)
    }

    fn write_local(
        &self,
        kg: &KeygroupName,
        key: &str,
        value: Bytes,
        base: &VersionVector,
        tombstone: bool,
    ) -> Result<Entry> {
        let group = self.keygroup(kg)?;
        let mut entries = group.entries.write();
        let current = entries.get(key);
        if tombstone && current.is_none_or(|e| e.tombstone) {
            return Err(EnokiError::not_found(format!("key {key:?} in {kg}")));
        }
        let mut version = base.clone();
        if let Some(current) = current {
            version.merge_in(&current.version);
        }
        let version = version.increment(&self.node);
        let entry = Entry {
            key: key.to_owned(),
            value,
            rank: version.total(),
            version,
            writer: self.node.clone(),
            write_ts: Timestamp::now(),
            tombstone,
        };
        entries.insert(key.to_owned(), entry.clone());
        Ok(entry)
    }

    /// Current live entry; tombstoned and absent keys are `NotFound`.
    pub fn get_local(&self, kg: &KeygroupName, key: &str) -> Result<Entry> {
        match self.get_raw(kg, key)? {
            Some(e) if !e.tombstone => Ok(e),
            _ => Err(EnokiError::not_found(format!("key {key:?} in {kg}"))),
        }
    }

    /// Stored entry including tombstones; `None` if the key was never seen.
    pub fn get_raw(&self, kg: &KeygroupName, key: &str) -> Result<Option<Entry>> {
        let group = self.keygroup(kg)?;
        let entries = group.entries.read();
        Ok(entries.get(key).cloned())
    }

    /// Up to `count` live entries with key >= `start_key`, ascending.
    /// The result is a point-in-time view of the keygroup.
    pub fn scan_local(&self, kg: &KeygroupName, start_key: &str, count: usize) -> Result<Vec<Entry>> {
        if count == 0 {
            return Err(EnokiError::bad_request("scan count must be at least 1"));
        }
        let group = self.keygroup(kg)?;
        let entries = group.entries.read();
        Ok(entries
            .range::<str, _>((std::ops::Bound::Included(start_key), std::ops::Bound::Unbounded))
            .map(|(_, e)| e)
            .filter(|e| !e.tombstone)
            .take(count)
            .cloned()
            .collect())
    }

    pub fn apply_remote(&self, kg: &KeygroupName, remote: Entry) -> Result<ApplyOutcome> {
        let group = self.keygroup(kg)?;
        let mut entries = group.entries.write();
        let Some(local) = entries.get_mut(&remote.key) else {
            entries.insert(remote.key.clone(), remote);
            return Ok(ApplyOutcome::Applied);
        };
        match remote.version.compare(&local.version) {
            Causality::After => {
                *local = remote;
                Ok(ApplyOutcome::Applied)
            }
            Causality::Before | Causality::Equal => Ok(ApplyOutcome::Ignored),
            Causality::Concurrent => {
                let merged = local.version.merge(&remote.version);
                if remote.precedence(local) == Ordering::Greater {
                    *local = remote;
                }
                local.version = merged;
                Ok(ApplyOutcome::ConflictResolved)
            }
        }
    }

    pub fn snapshot(&self, kg: &KeygroupName) -> Result<Vec<Entry>> {
        Ok(self.keygroup(kg)?.snapshot().into_values().collect())
    }
}
