//! Enoki: edge FaaS nodes with a replicated keygroup store.

pub mod clock;
pub mod error;
pub mod ids;
pub mod kvstore;
pub mod naming;
pub mod netem;
pub mod noded;
pub mod proto;
pub mod replication;
pub mod runtime;
pub mod session;
pub mod version;

pub use clock::Timestamp;
pub use error::{EnokiError, ErrorKind, Result};
pub use ids::{KeygroupName, NodeId};
pub use kvstore::{ApplyOutcome, Entry, KvStore};
pub use version::{Causality, VersionVector};
