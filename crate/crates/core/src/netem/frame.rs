//! Wire framing for all internal RPC.
//!
//! ```text
//! +----------------+----------------+------------------------------+
//! | len: u32 (BE)  | sender: u32 BE | payload (len bytes)          |
//! +----------------+----------------+------------------------------+
//! ```
//!
//! The payload is a JSON object carrying a `"type"` discriminator, a request
//! `"id"` and an optional `"blobs"` array of byte lengths. Raw binary blobs
//! (values, inputs, outputs) follow the JSON text back to back, in order, so
//! large values cross the emulated link without base64 inflation.

use bytes::{BufMut, Bytes, BytesMut};
use serde::de::DeserializeOwned;
use serde::Serialize;
use tokio::io::{AsyncRead, AsyncReadExt};

use crate::error::{EnokiError, Result};

pub const HEADER_LEN: usize = 8;
/// Sender index for peers that are not part of the topology.
pub const UNKNOWN_SENDER: u32 = u32::MAX;
pub const MAX_FRAME: usize = 256 * 1024 * 1024;

#[derive(Debug, Clone)]
pub struct Frame {
    pub sender: u32,
    pub payload: Bytes,
}

impl Frame {
    pub fn encode(&self) -> Bytes {
        let mut buf = BytesMut::with_capacity(HEADER_LEN + self.payload.len());
        buf.put_u32(self.payload.len() as u32);
        buf.put_u32(self.sender);
        buf.extend_from_slice(&self.payload);
        buf.freeze()
    }
}

/// Reads one frame; `Ok(None)` on a clean end of stream.
pub async fn read_frame<R: AsyncRead + Unpin>(reader: &mut R) -> std::io::Result<Option<Frame>> {
    let mut header = [0u8; HEADER_LEN];
    match reader.read_exact(&mut header).await {
        Ok(_) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_be_bytes(header[..4].try_into().unwrap()) as usize;
    let sender = u32::from_be_bytes(header[4..].try_into().unwrap());
    if len > MAX_FRAME {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            format!("frame of {len} bytes exceeds limit"),
        ));
    }
    let mut payload = vec![0u8; len];
    reader.read_exact(&mut payload).await?;
    Ok(Some(Frame {
        sender,
        payload: Bytes::from(payload),
    }))
}

/// Serializes `body` with its request id and appends `blobs`.
pub fn encode_payload<T: Serialize>(id: u64, body: &T, blobs: &[Bytes]) -> Bytes {
    let mut head = match serde_json::to_value(body).expect("message serializes") {
        serde_json::Value::Object(map) => map,
        other => {
            let mut map = serde_json::Map::new();
            map.insert("body".into(), other);
            map
        }
    };
    head.insert("id".into(), id.into());
    if !blobs.is_empty() {
        head.insert(
            "blobs".into(),
            blobs.iter().map(|b| b.len()).collect::<Vec<_>>().into(),
        );
    }
    let json = serde_json::to_vec(&head).expect("json object serializes");
    let mut buf = BytesMut::with_capacity(json.len() + blobs.iter().map(Bytes::len).sum::<usize>());
    buf.extend_from_slice(&json);
    for blob in blobs {
        buf.extend_from_slice(blob);
    }
    buf.freeze()
}

/// Result of decoding a payload. `id` is recovered even when the body does
/// not parse so the peer can still be sent an error reply.
pub struct Decoded<T> {
    pub id: u64,
    pub body: Result<T>,
    pub blobs: Vec<Bytes>,
}

pub fn decode_payload<T: DeserializeOwned>(payload: &Bytes) -> Decoded<T> {
    let mut stream = serde_json::Deserializer::from_slice(payload).into_iter::<serde_json::Value>();
    let head = match stream.next() {
        Some(Ok(serde_json::Value::Object(map))) => map,
        Some(Ok(_)) => return failed(0, EnokiError::bad_request("payload is not a JSON object")),
        Some(Err(e)) => return failed(0, EnokiError::bad_request(format!("malformed JSON: {e}"))),
        None => return failed(0, EnokiError::bad_request("empty payload")),
    };
    let offset = stream.byte_offset();
    let id = head.get("id").and_then(|v| v.as_u64()).unwrap_or(0);

    let mut blobs = Vec::new();
    if let Some(lens) = head.get("blobs") {
        let Some(lens) = lens.as_array() else {
            return failed(id, EnokiError::bad_request("blobs must be an array"));
        };
        let mut at = offset;
        for len in lens {
            let Some(len) = len.as_u64().map(|l| l as usize) else {
                return failed(id, EnokiError::bad_request("blob length must be an integer"));
            };
            if at + len > payload.len() {
                return failed(id, EnokiError::bad_request("blob overruns frame"));
            }
            blobs.push(payload.slice(at..at + len));
            at += len;
        }
    }
    let body = serde_json::from_value(serde_json::Value::Object(head)).map_err(EnokiError::from);
    Decoded { id, body, blobs }
}

fn failed<T>(id: u64, err: EnokiError) -> Decoded<T> {
    Decoded {
        id,
        body: Err(err),
        blobs: Vec::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use serde::Deserialize;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    #[serde(tag = "type")]
    enum Msg {
        Put { key: String },
        Ping,
    }

    #[tokio::test]
    async fn frame_header_layout() {
        let frame = Frame {
            sender: 3,
            payload: Bytes::from_static(b"{}"),
        };
        let wire = frame.encode();
        assert_eq!(&wire[..8], &[0, 0, 0, 2, 0, 0, 0, 3]);
        let mut reader = &wire[..];
        let back = read_frame(&mut reader).await.unwrap().unwrap();
        assert_eq!(back.sender, 3);
        assert_eq!(back.payload, frame.payload);
        assert!(read_frame(&mut reader).await.unwrap().is_none());
    }

    #[test]
    fn malformed_json_is_bad_request() {
        let d = decode_payload::<Msg>(&Bytes::from_static(b"{not json"));
        assert!(d.body.unwrap_err().is(crate::ErrorKind::BadRequest));
        let d = decode_payload::<Msg>(&Bytes::from_static(b"{\"id\":9,\"type\":\"Nope\"}"));
        assert_eq!(d.id, 9);
        assert!(d.body.is_err());
    }

    proptest! {
        #[test]
        fn payload_round_trip(key in ".{0,12}", id in any::<u64>(),
                              blobs in prop::collection::vec(prop::collection::vec(any::<u8>(), 0..64), 0..4)) {
            let blobs: Vec<Bytes> = blobs.into_iter().map(Bytes::from).collect();
            let msg = Msg::Put { key };
            let wire = encode_payload(id, &msg, &blobs);
            let d = decode_payload::<Msg>(&wire);
            prop_assert_eq!(d.id, id);
            prop_assert_eq!(d.body.unwrap(), msg);
            prop_assert_eq!(d.blobs, blobs);
        }
    }
}
