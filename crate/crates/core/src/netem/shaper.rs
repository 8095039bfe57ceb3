//! Per-direction link shaping and the delivery timer.
//!
//! Every outbound frame is assigned a delivery instant: the moment its last
//! byte clears the direction's token bucket plus the one-way propagation
//! delay. A single dispatch thread per process fires deliveries at those
//! instants. The thread sleeps on a condition variable with an absolute
//! deadline, which keeps wake-up error well below a millisecond.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};

use super::topology::{Bandwidth, LinkProfile, Topology};
use crate::ids::NodeId;

/// Token bucket depth per direction, in bytes.
pub const BUCKET_CAPACITY: f64 = 64.0 * 1024.0;

/// Idle-link delay for one message: propagation plus serialization.
pub fn delivery_delay(link: &LinkProfile, message_size_bytes: u64) -> Duration {
    let mut secs = link.rtt_ms / 2000.0;
    if let Bandwidth::BitsPerSec(bps) = link.bandwidth {
        secs += message_size_bytes as f64 * 8.0 / bps;
    }
    Duration::from_secs_f64(secs)
}

type Delivery = Box<dyn FnOnce() + Send>;

struct Job {
    at: Instant,
    seq: u64,
    run: Delivery,
    pending: Arc<AtomicUsize>,
}

impl PartialEq for Job {
    fn eq(&self, other: &Self) -> bool {
        self.at == other.at && self.seq == other.seq
    }
}

impl Eq for Job {}

impl PartialOrd for Job {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Job {
    // Reversed: BinaryHeap is a max-heap, we want the earliest job on top.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .at
            .cmp(&self.at)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

struct DispatchState {
    heap: BinaryHeap<Job>,
    seq: u64,
}

struct Dispatcher {
    state: Mutex<DispatchState>,
    wake: Condvar,
}

impl Dispatcher {
    fn global() -> &'static Dispatcher {
        static DISPATCHER: OnceLock<&'static Dispatcher> = OnceLock::new();
        DISPATCHER.get_or_init(|| {
            let d: &'static Dispatcher = Box::leak(Box::new(Dispatcher {
                state: Mutex::new(DispatchState {
                    heap: BinaryHeap::new(),
                    seq: 0,
                }),
                wake: Condvar::new(),
            }));
            std::thread::Builder::new()
                .name("netem-dispatch".into())
                .spawn(move || d.run())
                .expect("spawn netem dispatcher");
            d
        })
    }

    fn push(&self, at: Instant, run: Delivery, pending: Arc<AtomicUsize>) {
        let mut state = self.state.lock();
        state.seq += 1;
        let seq = state.seq;
        let earliest = state.heap.peek().is_none_or(|top| at < top.at);
        state.heap.push(Job {
            at,
            seq,
            run,
            pending,
        });
        drop(state);
        if earliest {
            self.wake.notify_one();
        }
    }

    fn run(&self) {
        let mut state = self.state.lock();
        loop {
            let now = Instant::now();
            let next_at = state.heap.peek().map(|j| j.at);
            match next_at {
                None => {
                    self.wake.wait(&mut state);
                }
                Some(at) if at <= now => {
                    let job = state.heap.pop().expect("peeked");
                    parking_lot::MutexGuard::unlocked(&mut state, || {
                        (job.run)();
                        job.pending.fetch_sub(1, AtomicOrdering::AcqRel);
                    });
                }
                Some(at) => {
                    self.wake.wait_until(&mut state, at);
                }
            }
        }
    }
}

struct Direction {
    tokens: f64,
    refilled_at: Instant,
    last_delivery: Instant,
    pending: Arc<AtomicUsize>,
}

/// Link emulation for all traffic leaving one node.
pub struct Netem {
    me: Option<NodeId>,
    topology: Arc<Topology>,
    directions: Mutex<HashMap<NodeId, Direction>>,
}

impl Netem {
    pub fn new(me: NodeId, topology: Arc<Topology>) -> Netem {
        Netem {
            me: Some(me),
            topology,
            directions: Mutex::new(HashMap::new()),
        }
    }

    /// Pass-through emulator for processes outside the topology.
    pub fn disabled() -> Netem {
        Netem {
            me: None,
            topology: Arc::new(Topology {
                nodes: Vec::new(),
                links: Vec::new(),
                default: Default::default(),
            }),
            directions: Mutex::new(HashMap::new()),
        }
    }

    pub fn me(&self) -> Option<&NodeId> {
        self.me.as_ref()
    }

    pub fn topology(&self) -> &Arc<Topology> {
        &self.topology
    }

    /// Index of this node in the topology, or `u32::MAX` when unknown.
    pub fn sender_index(&self) -> u32 {
        self.me
            .as_ref()
            .and_then(|me| self.topology.index_of(me))
            .unwrap_or(super::frame::UNKNOWN_SENDER)
    }

    pub fn resolve_sender(&self, index: u32) -> Option<NodeId> {
        self.topology.node_at(index).map(|n| n.id.clone())
    }

    /// Delivers `size` bytes towards `to` by calling `deliver` once the
    /// modeled delay elapses. Deliveries towards one peer keep send order.
    /// Never blocks the caller.
    pub fn schedule<F>(&self, to: Option<&NodeId>, size: usize, deliver: F)
    where
        F: FnOnce() + Send + 'static,
    {
        let (Some(me), Some(to)) = (self.me.as_ref(), to) else {
            deliver();
            return;
        };
        if self.topology.index_of(to).is_none() {
            deliver();
            return;
        }
        let profile = self.topology.profile(me, to);
        let now = Instant::now();
        let mut directions = self.directions.lock();
        let dir = directions.entry(to.clone()).or_insert_with(|| Direction {
            tokens: BUCKET_CAPACITY,
            refilled_at: now,
            last_delivery: now,
            pending: Arc::new(AtomicUsize::new(0)),
        });

        let mut depart = now;
        if let Bandwidth::BitsPerSec(bps) = profile.bandwidth {
            let rate = bps / 8.0;
            let elapsed = now.saturating_duration_since(dir.refilled_at).as_secs_f64();
            dir.tokens = (dir.tokens + elapsed * rate).min(BUCKET_CAPACITY);
            dir.refilled_at = now;
            let size = size as f64;
            if dir.tokens < size {
                depart = now + Duration::from_secs_f64((size - dir.tokens) / rate);
            }
            dir.tokens -= size;
        }
        let at = (depart + Duration::from_secs_f64(profile.rtt_ms / 2000.0)).max(dir.last_delivery);
        dir.last_delivery = at;

        if at <= now && dir.pending.load(AtomicOrdering::Acquire) == 0 {
            drop(directions);
            deliver();
            return;
        }
        let pending = dir.pending.clone();
        pending.fetch_add(1, AtomicOrdering::AcqRel);
        drop(directions);
        Dispatcher::global().push(at, Box::new(deliver), pending);
    }
}
