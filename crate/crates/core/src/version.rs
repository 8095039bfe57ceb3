//! Per-key version vectors.
//!
//! A vector maps node ids to update counters. Absent nodes count as zero
//! and zero counters are never stored, so two vectors describing the same
//! history are always structurally equal.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::EnokiError;
use crate::ids::NodeId;

/// Outcome of comparing two version vectors under the causal partial order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Causality {
    Before,
    After,
    Equal,
    Concurrent,
}

impl Causality {
    pub fn reverse(self) -> Causality {
        match self {
            Causality::Before => Causality::After,
            Causality::After => Causality::Before,
            other => other,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct VersionVector {
    entries: BTreeMap<NodeId, u64>,
}

impl VersionVector {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a vector from `(node, counter)` pairs, dropping zero counters.
    pub fn from_pairs<I>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (NodeId, u64)>,
    {
        let mut vv = VersionVector::new();
        for (node, counter) in pairs {
            if counter > 0 {
                let slot = vv.entries.entry(node).or_insert(0);
                *slot = (*slot).max(counter);
            }
        }
        vv
    }

    pub fn get(&self, node: &NodeId) -> u64 {
        self.entries.get(node).copied().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&NodeId, u64)> {
        self.entries.iter().map(|(n, c)| (n, *c))
    }

    /// Sum of all counters. Strictly increases along every causal chain,
    /// which makes it usable as a Lamport-style rank for tie-breaks.
    pub fn total(&self) -> u64 {
        self.entries.values().sum()
    }

    pub fn compare(&self, other: &VersionVector) -> Causality {
        let mut less = false;
        let mut greater = false;
        for node in self.entries.keys().chain(other.entries.keys()) {
            let (a, b) = (self.get(node), other.get(node));
            if a < b {
                less = true;
            } else if a > b {
                greater = true;
            }
            if less && greater {
                return Causality::Concurrent;
            }
        }
        match (less, greater) {
            (false, false) => Causality::Equal,
            (true, false) => Causality::Before,
            (false, true) => Causality::After,
            (true, true) => Causality::Concurrent,
        }
    }

    /// `true` when `self` has seen everything `other` has.
    pub fn dominates_or_equals(&self, other: &VersionVector) -> bool {
        matches!(self.compare(other), Causality::After | Causality::Equal)
    }

    pub fn merge(&self, other: &VersionVector) -> VersionVector {
        let mut out = self.clone();
        out.merge_in(other);
        out
    }

    pub fn merge_in(&mut self, other: &VersionVector) {
        for (node, counter) in &other.entries {
            let slot = self.entries.entry(node.clone()).or_insert(0);
            *slot = (*slot).max(*counter);
        }
    }

    pub fn increment(&self, node: &NodeId) -> VersionVector {
        let mut out = self.clone();
        *out.entries.entry(node.clone()).or_insert(0) += 1;
        out
    }
}

pub fn vv_compare(a: &VersionVector, b: &VersionVector) -> Causality {
    a.compare(b)
}

pub fn vv_merge(a: &VersionVector, b: &VersionVector) -> VersionVector {
    a.merge(b)
}

pub fn vv_increment(v: &VersionVector, n: &NodeId) -> VersionVector {
    v.increment(n)
}

/// Canonical text form: `node:counter` pairs sorted by node, joined by `,`.
impl fmt::Display for VersionVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (node, counter)) in self.entries.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{node}:{counter}")?;
        }
        Ok(())
    }
}

impl FromStr for VersionVector {
    type Err = EnokiError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.is_empty() {
            return Ok(VersionVector::new());
        }
        let mut pairs = Vec::new();
        for part in s.split(',') {
            let (node, counter) = part
                .rsplit_once(':')
                .ok_or_else(|| EnokiError::bad_request(format!("bad version pair {part:?}")))?;
            let counter: u64 = counter
                .parse()
                .map_err(|_| EnokiError::bad_request(format!("bad counter in {part:?}")))?;
            pairs.push((NodeId::new(node)?, counter));
        }
        Ok(VersionVector::from_pairs(pairs))
    }
}

impl Serialize for VersionVector {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for VersionVector {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        raw.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn n(s: &str) -> NodeId {
        NodeId::new(s).unwrap()
    }

    fn vv(s: &str) -> VersionVector {
        s.parse().unwrap()
    }

    #[test]
    fn compare_examples() {
        assert_eq!(vv("A:1").compare(&vv("A:2")), Causality::Before);
        assert_eq!(vv("A:1").compare(&vv("A:1")), Causality::Equal);
        // Explicit zeros are dropped on construction.
        let a = VersionVector::from_pairs([(n("A"), 1), (n("B"), 0)]);
        let b = VersionVector::from_pairs([(n("A"), 0), (n("B"), 1)]);
        assert_eq!(a.compare(&b), Causality::Concurrent);
    }

    #[test]
    fn merge_examples() {
        assert_eq!(vv("A:2").merge(&vv("B:3")), vv("A:2,B:3"));
        assert_eq!(vv("A:2").merge(&vv("A:1")), vv("A:2"));
        assert_eq!(vv("A:2,C:7").merge(&VersionVector::new()), vv("A:2,C:7"));
    }

    #[test]
    fn increment_examples() {
        assert_eq!(VersionVector::new().increment(&n("A")), vv("A:1"));
        assert_eq!(vv("A:1").increment(&n("A")), vv("A:2"));
        assert_eq!(vv("A:1").increment(&n("B")), vv("A:1,B:1"));
    }

    #[test]
    fn canonical_text_is_sorted() {
        let v = VersionVector::from_pairs([(n("B"), 3), (n("A"), 2)]);
        assert_eq!(v.to_string(), "A:2,B:3");
        assert_eq!(VersionVector::new().to_string(), "");
        assert!("A".parse::<VersionVector>().is_err());
        assert!("A:x".parse::<VersionVector>().is_err());
        assert_eq!(serde_json::to_string(&v).unwrap(), "\"A:2,B:3\"");
    }

    fn arb_vv() -> impl Strategy<Value = VersionVector> {
        prop::collection::vec((0usize..4, 0u64..4), 0..5).prop_map(|pairs| {
            VersionVector::from_pairs(
                pairs
                    .into_iter()
                    .map(|(i, c)| (n(["A", "B", "C", "D"][i]), c)),
            )
        })
    }

    proptest! {
        #[test]
        fn merge_dominates_inputs(a in arb_vv(), b in arb_vv()) {
            let m = a.merge(&b);
            prop_assert!(matches!(m.compare(&a), Causality::After | Causality::Equal));
            prop_assert!(matches!(m.compare(&b), Causality::After | Causality::Equal));
        }

        #[test]
        fn text_round_trip(a in arb_vv()) {
            prop_assert_eq!(a.to_string().parse::<VersionVector>().unwrap(), a);
        }

        #[test]
        fn increment_moves_strictly_forward(a in arb_vv(), i in 0usize..4) {
            let node = n(["A", "B", "C", "D"][i]);
            let next = a.increment(&node);
            prop_assert_eq!(next.compare(&a), Causality::After);
            prop_assert_eq!(next.total(), a.total() + 1);
        }
    }
}
