//! Handlers running as external processes speaking a line protocol on
//! stdin/stdout.
//!
//! The runtime writes `CALL <b64 input>`. Until the handler answers with
//! `RET <b64 output>` or `ERR <message>` it may issue requests, one at a
//! time, each answered with `OK [<b64>]`, `NF` or `ERR <message>`:
//!
//! ```text
//! KV GET <key>
//! KV SET <key> <b64 value>
//! KV SCAN <start> <count>     OK payload: JSON [[key, b64 value], ...]
//! KV DEL <key>
//! INVOKE <sync|async> <fn> <b64 input>
//! ```

use std::collections::BTreeMap;
use std::process::Stdio;

use async_trait::async_trait;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use bytes::Bytes;
use parking_lot::Mutex;
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::process::{Child, ChildStdin, ChildStdout, Command};

use super::{Handler, HandlerContext};
use crate::error::{EnokiError, ErrorKind, Result};
use crate::proto::InvokeMode;

struct Instance {
    _child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

/// How a call ended, and whether the instance can be reused.
enum Outcome {
    Done(Result<Bytes>),
    Broken(EnokiError),
}

impl Instance {
    async fn send(&mut self, line: &str) -> std::io::Result<()> {
        self.stdin.write_all(line.as_bytes()).await?;
        self.stdin.write_all(b"\n").await?;
        self.stdin.flush().await
    }

    async fn run(&mut self, input: &Bytes, ctx: &HandlerContext) -> Outcome {
        if let Err(e) = self.send(&format!("CALL {}", B64.encode(input))).await {
            return Outcome::Broken(EnokiError::internal(format!("handler stdin: {e}")));
        }
        let mut line = String::new();
        loop {
            line.clear();
            match self.stdout.read_line(&mut line).await {
                Ok(0) => return Outcome::Broken(EnokiError::internal("handler process exited")),
                Ok(_) => {}
                Err(e) => return Outcome::Broken(EnokiError::internal(format!("handler stdout: {e}"))),
            }
            let msg = line.trim_end_matches(['\r', '\n']);
            let (verb, rest) = msg.split_once(' ').unwrap_or((msg, ""));
            let reply = match verb {
                "RET" => {
                    return Outcome::Done(
                        decode(rest).map_err(|e| EnokiError::internal(format!("bad RET: {e}"))),
                    )
                }
                "ERR" => return Outcome::Done(Err(EnokiError::internal(rest.to_owned()))),
                "KV" => kv_request(rest, ctx).await,
                "INVOKE" => invoke_request(rest, ctx).await,
                _ => {
                    return Outcome::Broken(EnokiError::internal(format!(
                        "handler sent unknown line {msg:?}"
                    )))
                }
            };
            let answer = match reply {
                Ok(Some(data)) => format!("OK {}", B64.encode(data)),
                Ok(None) => "OK".to_owned(),
                Err(e) if e.is(ErrorKind::NotFound) => "NF".to_owned(),
                Err(e) => format!("ERR {}", e.to_string().replace('\n', " ")),
            };
            if let Err(e) = self.send(&answer).await {
                return Outcome::Broken(EnokiError::internal(format!("handler stdin: {e}")));
            }
        }
    }
}

fn decode(b64: &str) -> Result<Bytes> {
    B64.decode(b64.trim())
        .map(Bytes::from)
        .map_err(|e| EnokiError::bad_request(format!("invalid base64: {e}")))
}

async fn kv_request(rest: &str, ctx: &HandlerContext) -> Result<Option<Bytes>> {
    let parts: Vec<&str> = rest.split(' ').collect();
    match parts.as_slice() {
        ["GET", key] => ctx.kv.get(key).await.map(Some),
        ["SET", key, value] => ctx.kv.set(key, decode(value)?).await.map(|_| None),
        ["SET", key] => ctx.kv.set(key, Bytes::new()).await.map(|_| None),
        ["DEL", key] => ctx.kv.delete(key).await.map(|_| None),
        ["SCAN", start, count] => {
            let count = count
                .parse()
                .map_err(|_| EnokiError::bad_request(format!("bad scan count {count:?}")))?;
            let rows: Vec<(String, String)> = ctx
                .kv
                .scan(start, count)
                .await?
                .into_iter()
                .map(|(k, v)| (k, B64.encode(v)))
                .collect();
            Ok(Some(Bytes::from(serde_json::to_vec(&rows)?)))
        }
        _ => Err(EnokiError::bad_request(format!("malformed KV request {rest:?}"))),
    }
}

async fn invoke_request(rest: &str, ctx: &HandlerContext) -> Result<Option<Bytes>> {
    let parts: Vec<&str> = rest.split(' ').collect();
    let (mode, function, input) = match parts.as_slice() {
        [mode, function, input] => (*mode, *function, decode(input)?),
        [mode, function] => (*mode, *function, Bytes::new()),
        _ => return Err(EnokiError::bad_request(format!("malformed INVOKE {rest:?}"))),
    };
    let mode = match mode {
        "sync" => InvokeMode::Sync,
        "async" => InvokeMode::Async,
        other => return Err(EnokiError::bad_request(format!("unknown invoke mode {other:?}"))),
    };
    ctx.call(function, input, mode).await
}

/// A pool of handler processes, one per busy instance slot.
pub struct SubprocessHandler {
    program: String,
    args: Vec<String>,
    env: BTreeMap<String, String>,
    idle: Mutex<Vec<Instance>>,
}

impl SubprocessHandler {
    /// Splits `command` on whitespace (no shell) and launches one instance
    /// to check that it can run.
    pub async fn start(command: &str, env: &BTreeMap<String, String>, _threads: usize) -> Result<SubprocessHandler> {
        let mut words = command.split_whitespace().map(str::to_owned);
        let program = words
            .next()
            .ok_or_else(|| EnokiError::bad_request("empty handler command"))?;
        let handler = SubprocessHandler {
            program,
            args: words.collect(),
            env: env.clone(),
            idle: Mutex::new(Vec::new()),
        };
        let first = handler
            .spawn()
            .map_err(|e| EnokiError::bad_request(format!("cannot launch {command:?}: {e}")))?;
        handler.idle.lock().push(first);
        Ok(handler)
    }

    fn spawn(&self) -> std::io::Result<Instance> {
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .envs(&self.env)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .kill_on_drop(true)
            .spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(Instance {
            _child: child,
            stdin,
            stdout,
        })
    }
}

#[async_trait]
impl Handler for SubprocessHandler {
    async fn call(&self, input: Bytes, ctx: &HandlerContext) -> Result<Bytes> {
        let pooled = self.idle.lock().pop();
        let mut instance = match pooled {
            Some(i) => i,
            None => self
                .spawn()
                .map_err(|e| EnokiError::internal(format!("cannot launch {}: {e}", self.program)))?,
        };
        // Dropping `instance` (on error or cancellation) kills the process.
        match instance.run(&input, ctx).await {
            Outcome::Done(result) => {
                self.idle.lock().push(instance);
                result
            }
            Outcome::Broken(e) => Err(e),
        }
    }
}
