//! Multiplexed request/response RPC over TCP with every outbound frame
//! passing through the node's [`Netem`] shaper.

use std::collections::HashMap;
use std::future::Future;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use bytes::Bytes;
use parking_lot::Mutex;
use tokio::io::AsyncWriteExt;
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, oneshot};
use tokio::task::JoinSet;

use super::frame::{decode_payload, encode_payload, read_frame, Frame};
use super::shaper::Netem;
use crate::error::{EnokiError, Result};
use crate::ids::NodeId;
use crate::proto::{Request, Response};

pub const DEFAULT_CALL_TIMEOUT: Duration = Duration::from_secs(40);
const CONNECT_TIMEOUT: Duration = Duration::from_secs(3);

type Reply = Result<(Response, Vec<Bytes>)>;

/// Spawns the task draining a connection's outbound frame queue.
fn spawn_writer(mut half: tokio::net::tcp::OwnedWriteHalf) -> mpsc::UnboundedSender<Bytes> {
    let (tx, mut rx) = mpsc::unbounded_channel::<Bytes>();
    tokio::spawn(async move {
        while let Some(frame) = rx.recv().await {
            if half.write_all(&frame).await.is_err() {
                break;
            }
        }
        let _ = half.shutdown().await;
    });
    tx
}

struct Connection {
    outbound: mpsc::UnboundedSender<Bytes>,
    pending: Mutex<HashMap<u64, oneshot::Sender<Reply>>>,
    alive: AtomicBool,
}

impl Connection {
    fn fail_all(&self, err: &EnokiError) {
        self.alive.store(false, Ordering::Release);
        let pending: Vec<_> = self.pending.lock().drain().collect();
        for (_, tx) in pending {
            let _ = tx.send(Err(err.clone()));
        }
    }
}

/// A call whose request frame is already queued; awaiting it yields the reply.
pub struct PendingCall {
    rx: oneshot::Receiver<Reply>,
    timeout: Duration,
}

impl PendingCall {
    pub async fn wait(self) -> Reply {
        match tokio::time::timeout(self.timeout, self.rx).await {
            Ok(Ok(reply)) => reply,
            Ok(Err(_)) => Err(EnokiError::unavailable("connection closed")),
            Err(_) => Err(EnokiError::timeout("rpc call timed out")),
        }
    }
}

/// Client side of one logical link to a remote endpoint.
pub struct RpcClient {
    addr: String,
    peer: Option<NodeId>,
    netem: Arc<Netem>,
    conn: tokio::sync::Mutex<Option<Arc<Connection>>>,
    next_id: AtomicU64,
    timeout: Duration,
}

impl RpcClient {
    /// `peer` names the remote node for link emulation; `None` leaves the
    /// traffic unshaped (control plane).
    pub fn new(addr: impl Into<String>, peer: Option<NodeId>, netem: Arc<Netem>) -> RpcClient {
        RpcClient {
            addr: addr.into(),
            peer,
            netem,
            conn: tokio::sync::Mutex::new(None),
            next_id: AtomicU64::new(1),
            timeout: DEFAULT_CALL_TIMEOUT,
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn addr(&self) -> &str {
        &self.addr
    }

    pub fn peer(&self) -> Option<&NodeId> {
        self.peer.as_ref()
    }

    async fn connection(&self) -> Result<Arc<Connection>> {
        let mut slot = self.conn.lock().await;
        if let Some(conn) = slot.as_ref() {
            if conn.alive.load(Ordering::Acquire) {
                return Ok(conn.clone());
            }
        }
        let stream = tokio::time::timeout(CONNECT_TIMEOUT, TcpStream::connect(&self.addr))
            .await
            .map_err(|_| EnokiError::unavailable(format!("connect to {} timed out", self.addr)))?
            .map_err(|e| EnokiError::unavailable(format!("connect to {}: {e}", self.addr)))?;
        stream.set_nodelay(true)?;
        let (mut read_half, write_half) = stream.into_split();
        let conn = Arc::new(Connection {
            outbound: spawn_writer(write_half),
            pending: Mutex::new(HashMap::new()),
            alive: AtomicBool::new(true),
        });
        let reader_conn = conn.clone();
        tokio::spawn(async move {
            loop {
                match read_frame(&mut read_half).await {
                    Ok(Some(frame)) => {
                        let decoded = decode_payload::<Response>(&frame.payload);
                        let waiter = reader_conn.pending.lock().remove(&decoded.id);
                        if let Some(tx) = waiter {
                            let _ = tx.send(decoded.body.map(|r| (r, decoded.blobs)));
                        }
                    }
                    Ok(None) => {
                        reader_conn.fail_all(&EnokiError::unavailable("connection closed by peer"));
                        break;
                    }
                    Err(e) => {
                        reader_conn.fail_all(&EnokiError::unavailable(format!("read failed: {e}")));
                        break;
                    }
                }
            }
        });
        *slot = Some(conn.clone());
        Ok(conn)
    }

    /// Queues the request frame and returns a handle for the reply. Frames
    /// queued by successive `begin` calls leave in call order.
    pub async fn begin(&self, req: &Request, blobs: &[Bytes]) -> Result<PendingCall> {
        let conn = self.connection().await?;
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let (tx, rx) = oneshot::channel();
        conn.pending.lock().insert(id, tx);
        let frame = Frame {
            sender: self.netem.sender_index(),
            payload: encode_payload(id, req, blobs),
        }
        .encode();
        let outbound = conn.outbound.clone();
        self.netem.schedule(self.peer.as_ref(), frame.len(), move || {
            let _ = outbound.send(frame);
        });
        Ok(PendingCall {
            rx,
            timeout: self.timeout,
        })
    }

    /// Sends a request and waits for the reply. `Err` replies surface as errors.
    pub async fn call(&self, req: &Request, blobs: &[Bytes]) -> Result<(Response, Vec<Bytes>)> {
        let (resp, blobs) = self.begin(req, blobs).await?.wait().await?;
        Ok((resp.into_result()?, blobs))
    }

    pub async fn ping(&self) -> Result<()> {
        match self.call(&Request::Ping, &[]).await?.0 {
            Response::Pong => Ok(()),
            other => Err(crate::proto::unexpected(other)),
        }
    }
}

/// Server-side request handler.
#[async_trait]
pub trait RpcService: Send + Sync + 'static {
    async fn handle(&self, from: Option<NodeId>, req: Request, blobs: Vec<Bytes>) -> (Response, Vec<Bytes>);
}

/// Accepts connections until the returned future is dropped. Aborting the
/// task that drives it also tears down every open connection.
pub fn serve(
    listener: TcpListener,
    service: Arc<dyn RpcService>,
    netem: Arc<Netem>,
) -> impl Future<Output = ()> + Send + 'static {
    async move {
        let mut connections = JoinSet::new();
        loop {
            tokio::select! {
                accepted = listener.accept() => {
                    let Ok((stream, _)) = accepted else { continue };
                    let _ = stream.set_nodelay(true);
                    connections.spawn(serve_connection(stream, service.clone(), netem.clone()));
                }
                Some(_) = connections.join_next(), if !connections.is_empty() => {}
            }
        }
    }
}

async fn serve_connection(stream: TcpStream, service: Arc<dyn RpcService>, netem: Arc<Netem>) {
    let (mut read_half, write_half) = stream.into_split();
    let outbound = spawn_writer(write_half);
    let mut in_flight = JoinSet::new();
    loop {
        // read_frame is not cancel-safe, so finished requests are reaped
        // between frames instead of racing the read.
        while in_flight.try_join_next().is_some() {}
        let frame = match read_frame(&mut read_half).await {
            Ok(Some(frame)) => frame,
            Ok(None) => break,
            Err(e) => {
                log::debug!("rpc connection dropped: {e}");
                break;
            }
        };
        let from = netem.resolve_sender(frame.sender);
        let service = service.clone();
        let netem = netem.clone();
        let outbound = outbound.clone();
        in_flight.spawn(async move {
            let decoded = decode_payload::<Request>(&frame.payload);
            let (resp, blobs) = match decoded.body {
                Ok(req) => service.handle(from.clone(), req, decoded.blobs).await,
                Err(err) => (Response::error(&err), Vec::new()),
            };
            let reply = Frame {
                sender: netem.sender_index(),
                payload: encode_payload(decoded.id, &resp, &blobs),
            }
            .encode();
            netem.schedule(from.as_ref(), reply.len(), move || {
                let _ = outbound.send(reply);
            });
        });
    }
    // Let requests already received finish and reply.
    while in_flight.join_next().await.is_some() {}
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Echo;

    #[async_trait]
    impl RpcService for Echo {
        async fn handle(&self, _from: Option<NodeId>, req: Request, blobs: Vec<Bytes>) -> (Response, Vec<Bytes>) {
            match req {
                Request::Ping => (Response::Pong, Vec::new()),
                Request::Invoke { function, .. } => {
                    if function == "slow" {
                        tokio::time::sleep(Duration::from_millis(10)).await;
                    }
                    (Response::Output, blobs)
                }
                _ => (Response::error(&EnokiError::bad_request("unsupported")), Vec::new()),
            }
        }
    }

    async fn start() -> String {
        let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        tokio::spawn(serve(listener, Arc::new(Echo), Arc::new(Netem::disabled())));
        addr
    }

    #[tokio::test]
    async fn round_trips_requests_with_blobs() {
        let addr = start().await;
        let client = RpcClient::new(addr, None, Arc::new(Netem::disabled()));
        client.ping().await.unwrap();
        let req = Request::Invoke {
            function: "f".into(),
            mode: crate::proto::InvokeMode::Sync,
            depth: 0,
        };
        let (resp, blobs) = client.call(&req, &[Bytes::from_static(b"hello")]).await.unwrap();
        assert_eq!(resp, Response::Output);
        assert_eq!(blobs, vec![Bytes::from_static(b"hello")]);
        let err = client
            .call(&Request::LookupNode { node: NodeId::new("x").unwrap() }, &[])
            .await
            .unwrap_err();
        assert!(err.is(crate::ErrorKind::BadRequest));
    }

    #[tokio::test]
    async fn malformed_frames_get_error_replies_and_connection_survives() {
        let addr = start().await;
        let mut stream = TcpStream::connect(&addr).await.unwrap();
        let bad = Frame { sender: u32::MAX, payload: Bytes::from_static(b"{oops") }.encode();
        stream.write_all(&bad).await.unwrap();
        let reply = read_frame(&mut stream).await.unwrap().unwrap();
        let decoded = decode_payload::<Response>(&reply.payload);
        assert!(matches!(decoded.body.unwrap(), Response::Err { kind: crate::ErrorKind::BadRequest, .. }));
        let ping = Frame { sender: u32::MAX, payload: encode_payload(5, &Request::Ping, &[]) }.encode();
        stream.write_all(&ping).await.unwrap();
        let reply = read_frame(&mut stream).await.unwrap().unwrap();
        let decoded = decode_payload::<Response>(&reply.payload);
        assert_eq!(decoded.id, 5);
        assert_eq!(decoded.body.unwrap(), Response::Pong);
    }

    #[tokio::test]
    async fn requests_finishing_mid_frame_do_not_corrupt_the_stream() {
        let addr = start().await;
        let mut stream = TcpStream::connect(&addr).await.unwrap();
        let invoke = |function: &str| Request::Invoke {
            function: function.into(),
            mode: crate::proto::InvokeMode::Sync,
            depth: 0,
        };
        let slow = Frame { sender: u32::MAX, payload: encode_payload(1, &invoke("slow"), &[]) }.encode();
        let big = Frame {
            sender: u32::MAX,
            payload: encode_payload(2, &invoke("f"), &[Bytes::from(vec![7u8; 4096])]),
        }
        .encode();
        stream.write_all(&slow).await.unwrap();
        stream.write_all(&big[..100]).await.unwrap();
        stream.flush().await.unwrap();
        // The slow request completes while the second frame is half read.
        tokio::time::sleep(Duration::from_millis(50)).await;
        stream.write_all(&big[100..]).await.unwrap();
        let mut ids = Vec::new();
        for _ in 0..2 {
            let reply = tokio::time::timeout(Duration::from_secs(2), read_frame(&mut stream))
                .await
                .expect("reply lost")
                .unwrap()
                .unwrap();
            let decoded = decode_payload::<Response>(&reply.payload);
            assert_eq!(decoded.body.unwrap(), Response::Output);
            ids.push(decoded.id);
        }
        ids.sort();
        assert_eq!(ids, vec![1, 2]);
    }

    #[tokio::test]
    async fn unreachable_server_is_unavailable() {
        let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        drop(listener);
        let client = RpcClient::new(addr, None, Arc::new(Netem::disabled()));
        assert!(client.ping().await.unwrap_err().is(crate::ErrorKind::Unavailable));
    }
}
