//! Internal RPC message set shared by nodes, the naming service and
//! benchmark clients. Binary data travels as frame blobs, never in JSON.

use std::collections::BTreeMap;

use bytes::Bytes;
use serde::{Deserialize, Serialize};

use crate::clock::Timestamp;
use crate::error::{EnokiError, ErrorKind, Result};
use crate::ids::{KeygroupName, NodeId};
use crate::kvstore::{ApplyOutcome, Entry};
use crate::naming::{KeygroupRecord, NodeRecord};
use crate::version::VersionVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InvokeMode {
    Sync,
    Async,
}

/// An [`Entry`] without its value; the value rides in a blob.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntryMeta {
    pub key: String,
    pub version: VersionVector,
    pub writer: NodeId,
    pub write_ts: Timestamp,
    #[serde(default)]
    pub tombstone: bool,
    pub rank: u64,
}

impl EntryMeta {
    pub fn split(entry: Entry) -> (EntryMeta, Bytes) {
        (
            EntryMeta {
                key: entry.key,
                version: entry.version,
                writer: entry.writer,
                write_ts: entry.write_ts,
                tombstone: entry.tombstone,
                rank: entry.rank,
            },
            entry.value,
        )
    }

    pub fn join(self, value: Bytes) -> Entry {
        Entry {
            key: self.key,
            value,
            version: self.version,
            writer: self.writer,
            write_ts: self.write_ts,
            tombstone: self.tombstone,
            rank: self.rank,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum Request {
    Ping,
    // naming service
    RegisterNode { node: NodeId, address: String },
    LookupNode { node: NodeId },
    CreateKeygroup { name: KeygroupName, replica: NodeId },
    AddReplica { name: KeygroupName, node: NodeId },
    LookupKeygroup { name: KeygroupName },
    // replication
    FetchKeygroup { keygroup: KeygroupName },
    AddPeer { keygroup: KeygroupName, node: NodeId, address: String },
    /// blob 0: value
    Update { keygroup: KeygroupName, entry: EntryMeta },
    // session access
    SessionGet { keygroup: KeygroupName, key: String, #[serde(default)] min: VersionVector },
    /// blob 0: value
    SessionSet { keygroup: KeygroupName, key: String, #[serde(default)] base: VersionVector },
    SessionScan {
        keygroup: KeygroupName,
        start: String,
        count: usize,
        #[serde(default)]
        min: BTreeMap<String, VersionVector>,
    },
    SessionDelete { keygroup: KeygroupName, key: String, #[serde(default)] base: VersionVector },
    RawGet { keygroup: KeygroupName, key: String },
    /// blob 0: input
    Invoke { function: String, mode: InvokeMode, #[serde(default)] depth: u32 },
}

impl Request {
    pub fn kind(&self) -> &'static str {
        match self {
            Request::Ping => "Ping",
            Request::RegisterNode { .. } => "RegisterNode",
            Request::LookupNode { .. } => "LookupNode",
            Request::CreateKeygroup { .. } => "CreateKeygroup",
            Request::AddReplica { .. } => "AddReplica",
            Request::LookupKeygroup { .. } => "LookupKeygroup",
            Request::FetchKeygroup { .. } => "FetchKeygroup",
            Request::AddPeer { .. } => "AddPeer",
            Request::Update { .. } => "Update",
            Request::SessionGet { .. } => "SessionGet",
            Request::SessionSet { .. } => "SessionSet",
            Request::SessionScan { .. } => "SessionScan",
            Request::SessionDelete { .. } => "SessionDelete",
            Request::RawGet { .. } => "RawGet",
            Request::Invoke { .. } => "Invoke",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum Response {
    Pong,
    Ack,
    Node { record: NodeRecord },
    Keygroup { record: KeygroupRecord },
    /// blob 0: value, present iff `entry` is set
    Entry { entry: Option<EntryMeta> },
    /// one blob per entry, in order
    Entries { entries: Vec<EntryMeta> },
    Applied { outcome: ApplyOutcome },
    /// blob 0: output
    Output,
    Accepted,
    Err { kind: ErrorKind, detail: String },
}

impl Response {
    pub fn error(err: &EnokiError) -> Response {
        Response::Err {
            kind: err.kind,
            detail: err.detail.clone(),
        }
    }

    /// Turns an `Err` reply back into an [`EnokiError`].
    pub fn into_result(self) -> Result<Response> {
        match self {
            Response::Err { kind, detail } => Err(EnokiError::new(kind, detail)),
            other => Ok(other),
        }
    }
}

pub fn entry_reply(entry: Option<Entry>) -> (Response, Vec<Bytes>) {
    match entry {
        Some(e) => {
            let (meta, value) = EntryMeta::split(e);
            (Response::Entry { entry: Some(meta) }, vec![value])
        }
        None => (Response::Entry { entry: None }, Vec::new()),
    }
}

pub fn entries_reply(entries: Vec<Entry>) -> (Response, Vec<Bytes>) {
    let (metas, values): (Vec<_>, Vec<_>) = entries.into_iter().map(EntryMeta::split).unzip();
    (Response::Entries { entries: metas }, values)
}

pub fn unexpected(resp: Response) -> EnokiError {
    EnokiError::internal(format!("unexpected reply {resp:?}"))
}

/// Pairs entry metadata with the blobs that carry their values.
pub fn join_entries(metas: Vec<EntryMeta>, blobs: Vec<Bytes>) -> Result<Vec<Entry>> {
    if metas.len() != blobs.len() {
        return Err(EnokiError::bad_request(format!(
            "{} entries but {} value blobs",
            metas.len(),
            blobs.len()
        )));
    }
    Ok(metas.into_iter().zip(blobs).map(|(m, v)| m.join(v)).collect())
}

pub fn first_blob(blobs: Vec<Bytes>) -> Bytes {
    blobs.into_iter().next().unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netem::frame::{decode_payload, encode_payload};

    #[test]
    fn requests_carry_type_discriminator() {
        let req = Request::SessionGet {
            keygroup: KeygroupName::new("g").unwrap(),
            key: "k".into(),
            min: "A:1".parse().unwrap(),
        };
        let wire = encode_payload(7, &req, &[]);
        let json: serde_json::Value = serde_json::from_slice(&wire).unwrap();
        assert_eq!(json["type"], "SessionGet");
        assert_eq!(json["id"], 7);
        assert_eq!(json["min"], "A:1");
        let back = decode_payload::<Request>(&wire);
        assert_eq!(back.body.unwrap(), req);
    }

    #[test]
    fn unit_variants_tolerate_envelope_fields() {
        let wire = encode_payload(1, &Request::Ping, &[Bytes::from_static(b"x")]);
        let back = decode_payload::<Request>(&wire);
        assert_eq!(back.body.unwrap(), Request::Ping);
        assert_eq!(back.blobs, vec![Bytes::from_static(b"x")]);
    }

    #[test]
    fn entry_values_travel_as_blobs() {
        let entry = Entry {
            key: "k".into(),
            value: Bytes::from(vec![0u8, 255, 10]),
            version: "A:2".parse().unwrap(),
            writer: NodeId::new("A").unwrap(),
            write_ts: Timestamp(5),
            tombstone: false,
            rank: 2,
        };
        let (resp, blobs) = entries_reply(vec![entry.clone()]);
        let wire = encode_payload(3, &resp, &blobs);
        let back = decode_payload::<Response>(&wire);
        let Response::Entries { entries } = back.body.unwrap() else { panic!() };
        assert_eq!(join_entries(entries, back.blobs).unwrap(), vec![entry]);
    }
}
