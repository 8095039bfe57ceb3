use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{EnokiError, Result};
use crate::ids::NodeId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Client,
    Edge,
    Cloud,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Client => "client",
            Role::Edge => "edge",
            Role::Cloud => "cloud",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    Unlimited,
    BitsPerSec(f64),
}

impl Bandwidth {
    pub fn from_mbps(mbps: f64) -> Bandwidth {
        if mbps <= 0.0 {
            Bandwidth::Unlimited
        } else {
            Bandwidth::BitsPerSec(mbps * 1e6)
        }
    }

    pub fn mbps(self) -> f64 {
        match self {
            Bandwidth::Unlimited => 0.0,
            Bandwidth::BitsPerSec(bps) => bps / 1e6,
        }
    }
}

/// Symmetric link between two nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkProfile {
    pub a: NodeId,
    pub b: NodeId,
    pub rtt_ms: f64,
    pub bandwidth: Bandwidth,
}

impl LinkProfile {
    pub fn one_way_ms(&self) -> f64 {
        self.rtt_ms / 2.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologyNode {
    pub id: NodeId,
    pub role: Role,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub addr: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkSpec {
    pub a: NodeId,
    pub b: NodeId,
    #[serde(default)]
    pub rtt_ms: f64,
    #[serde(default)]
    pub mbps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DefaultLink {
    #[serde(default)]
    pub rtt_ms: f64,
    #[serde(default)]
    pub mbps: f64,
}

impl Default for DefaultLink {
    fn default() -> Self {
        DefaultLink {
            rtt_ms: 0.0,
            mbps: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub nodes: Vec<TopologyNode>,
    #[serde(default)]
    pub links: Vec<LinkSpec>,
    #[serde(default)]
    pub default: DefaultLink,
}

impl Topology {
    pub fn from_json(text: &str) -> Result<Topology> {
        let topo: Topology = serde_json::from_str(text)?;
        topo.validate()?;
        Ok(topo)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Topology> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| {
            EnokiError::bad_request(format!("cannot read topology {}: {e}", path.display()))
        })?;
        Topology::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("topology serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if seen.insert(node.id.clone(), i).is_some() {
                return Err(EnokiError::bad_request(format!("duplicate node {}", node.id)));
            }
        }
        let mut pairs = HashMap::new();
        for link in &self.links {
            for end in [&link.a, &link.b] {
                if !seen.contains_key(end) {
                    return Err(EnokiError::bad_request(format!("link references unknown node {end}")));
                }
            }
            if link.rtt_ms < 0.0 || link.mbps < 0.0 {
                return Err(EnokiError::bad_request(format!(
                    "negative link parameter on {}-{}",
                    link.a, link.b
                )));
            }
            let key = ordered_pair(&link.a, &link.b);
            if pairs.insert(key, ()).is_some() {
                return Err(EnokiError::bad_request(format!(
                    "link {}-{} listed twice",
                    link.a, link.b
                )));
            }
        }
        Ok(())
    }

    pub fn index_of(&self, id: &NodeId) -> Option<u32> {
        self.nodes.iter().position(|n| &n.id == id).map(|i| i as u32)
    }

    pub fn node_at(&self, index: u32) -> Option<&TopologyNode> {
        self.nodes.get(index as usize)
    }

    pub fn node(&self, id: &NodeId) -> Option<&TopologyNode> {
        self.nodes.iter().find(|n| &n.id == id)
    }

    /// Link parameters between `a` and `b`; unlisted pairs get the default.
    pub fn profile(&self, a: &NodeId, b: &NodeId) -> LinkProfile {
        let listed = self
            .links
            .iter()
            .find(|l| (&l.a == a && &l.b == b) || (&l.a == b && &l.b == a));
        let (rtt_ms, mbps) = match listed {
            Some(l) => (l.rtt_ms, l.mbps),
            None => (self.default.rtt_ms, self.default.mbps),
        };
        LinkProfile {
            a: a.clone(),
            b: b.clone(),
            rtt_ms,
            bandwidth: Bandwidth::from_mbps(mbps),
        }
    }

    pub fn set_link(&mut self, a: &NodeId, b: &NodeId, rtt_ms: f64, mbps: f64) {
        self.links
            .retain(|l| !((&l.a == a && &l.b == b) || (&l.a == b && &l.b == a)));
        self.links.push(LinkSpec {
            a: a.clone(),
            b: b.clone(),
            rtt_ms,
            mbps,
        });
    }
}

fn ordered_pair(a: &NodeId, b: &NodeId) -> (NodeId, NodeId) {
    if a <= b {
        (a.clone(), b.clone())
    } else {
        (b.clone(), a.clone())
    }
}
