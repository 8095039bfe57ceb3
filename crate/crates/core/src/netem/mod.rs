//! In-process emulation of edge-cloud links.
//!
//! Latency and bandwidth are applied at the message-framing layer: each
//! daemon shapes the frames it sends according to the link between itself
//! and the receiver, identified by the sender index in the frame header.

pub mod frame;
pub mod pool;
pub mod rpc;
pub mod shaper;
pub mod topology;

pub use frame::Frame;
pub use pool::PeerPool;
pub use rpc::{RpcClient, RpcService};
pub use shaper::{delivery_delay, Netem, BUCKET_CAPACITY};
pub use topology::{Bandwidth, LinkProfile, Role, Topology, TopologyNode};
