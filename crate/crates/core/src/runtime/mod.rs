//! Single-node function runtime.
//!
//! Functions are deployed from a [`FunctionSpec`] and invoked synchronously
//! or asynchronously. Each function has `threads` instance slots; waiting
//! invocations queue FIFO on a fair semaphore. Every invocation gets a fresh
//! [`Session`] over the function's keygroup, while the keygroup endpoint
//! itself is bound once at deploy time and reused.

pub mod builtins;
pub mod subprocess;

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Weak};
use std::time::Duration;

use async_trait::async_trait;
use bytes::Bytes;
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use tokio::sync::{Notify, Semaphore};

use crate::clock::Timestamp;
use crate::error::{EnokiError, ErrorKind, Result};
use crate::ids::{KeygroupName, NodeId};
use crate::proto::InvokeMode;
use crate::session::{KvEndpoint, Session};

pub use builtins::list_builtins;

pub const QUEUE_CAPACITY: usize = 10_000;
pub const HANDLER_TIMEOUT: Duration = Duration::from_secs(30);
pub const MAX_CALL_DEPTH: u32 = 16;
/// Prefix marking a handler reference as a subprocess command line.
pub const SUBPROCESS_PREFIX: &str = "cmd:";

fn one() -> u32 {
    1
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionSpec {
    pub name: String,
    /// A builtin name, or `cmd:<command line>` for a subprocess handler.
    pub handler: String,
    #[serde(default = "one")]
    pub threads: u32,
    /// Defaults to the function name.
    #[serde(default)]
    pub keygroup: Option<KeygroupName>,
    #[serde(default = "yes")]
    pub replicate_from_existing: bool,
    #[serde(default)]
    pub env: BTreeMap<String, String>,
}

impl FunctionSpec {
    pub fn new(name: impl Into<String>, handler: impl Into<String>) -> FunctionSpec {
        FunctionSpec {
            name: name.into(),
            handler: handler.into(),
            threads: 1,
            keygroup: None,
            replicate_from_existing: true,
            env: BTreeMap::new(),
        }
    }

    pub fn threads(mut self, threads: u32) -> Self {
        self.threads = threads;
        self
    }

    pub fn keygroup(mut self, kg: KeygroupName) -> Self {
        self.keygroup = Some(kg);
        self
    }

    pub fn replicate_from_existing(mut self, yes: bool) -> Self {
        self.replicate_from_existing = yes;
        self
    }

    pub fn env(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.env.insert(key.into(), value.into());
        self
    }

    pub fn keygroup_name(&self) -> Result<KeygroupName> {
        match &self.keygroup {
            Some(kg) => Ok(kg.clone()),
            None => KeygroupName::new(self.name.as_str()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let valid_name = !self.name.is_empty()
            && self.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-');
        if !valid_name {
            return Err(EnokiError::bad_request(format!("invalid function name {:?}", self.name)));
        }
        if self.threads == 0 {
            return Err(EnokiError::bad_request("threads must be at least 1"));
        }
        self.keygroup_name()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeploymentResult {
    pub created_keygroup: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replicated_from: Option<NodeId>,
    /// Set when the function's state lives only on another node.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub remote_store: Option<NodeId>,
}

#[derive(Debug, Clone)]
pub struct Invocation {
    pub function: String,
    pub input: Bytes,
    pub mode: InvokeMode,
    pub depth: u32,
    pub received_ts: Timestamp,
}

/// Services the runtime needs from the hosting node.
#[async_trait]
pub trait Platform: Send + Sync {
    /// Makes `kg` usable by a function on this node and returns the
    /// endpoint its sessions should use.
    async fn prepare_keygroup(
        &self,
        kg: &KeygroupName,
        replicate_from_existing: bool,
    ) -> Result<(DeploymentResult, Arc<dyn KvEndpoint>)>;

    /// Invokes `function` on another node. Async calls return once the
    /// remote node has accepted the invocation.
    async fn remote_invoke(
        &self,
        node: &NodeId,
        function: &str,
        input: Bytes,
        mode: InvokeMode,
        depth: u32,
    ) -> Result<Option<Bytes>>;
}

/// The function body ABI.
#[async_trait]
pub trait Handler: Send + Sync {
    async fn call(&self, input: Bytes, ctx: &HandlerContext) -> Result<Bytes>;
}

/// What a handler can reach while it runs.
pub struct HandlerContext {
    pub kv: Session,
    pub self_node: NodeId,
    pub function: String,
    env: Arc<BTreeMap<String, String>>,
    runtime: Arc<Runtime>,
    depth: u32,
}

impl HandlerContext {
    pub fn env(&self, key: &str) -> Option<&str> {
        self.env.get(key).map(String::as_str)
    }

    /// Calls another function, at the node named by the `route.<fn>` env
    /// entry if present, otherwise locally.
    pub async fn call(&self, function: &str, input: impl Into<Bytes>, mode: InvokeMode) -> Result<Option<Bytes>> {
        let route = self
            .env(&format!("route.{function}"))
            .map(NodeId::new)
            .transpose()?;
        self.call_at(route.as_ref(), function, input, mode).await
    }

    pub async fn call_at(
        &self,
        node: Option<&NodeId>,
        function: &str,
        input: impl Into<Bytes>,
        mode: InvokeMode,
    ) -> Result<Option<Bytes>> {
        let depth = self.depth + 1;
        match node {
            Some(n) if *n != self.self_node => {
                let platform = self.runtime.platform()?;
                platform.remote_invoke(n, function, input.into(), mode, depth).await
            }
            _ => self.runtime.invoke(function, input.into(), mode, depth).await,
        }
    }
}

struct Function {
    spec: FunctionSpec,
    result: DeploymentResult,
    handler: Arc<dyn Handler>,
    endpoint: Arc<dyn KvEndpoint>,
    keygroup: KeygroupName,
    env: Arc<BTreeMap<String, String>>,
    slots: Arc<Semaphore>,
    /// Invocations admitted and not yet finished, running or queued.
    admitted: AtomicUsize,
}

/// Resolves a handler reference to something callable.
pub async fn resolve_handler(spec: &FunctionSpec) -> Result<Arc<dyn Handler>> {
    if let Some(cmd) = spec.handler.strip_prefix(SUBPROCESS_PREFIX) {
        let handler = subprocess::SubprocessHandler::start(cmd, &spec.env, spec.threads as usize).await?;
        return Ok(Arc::new(handler));
    }
    builtins::builtin(&spec.handler)
        .ok_or_else(|| EnokiError::bad_request(format!("unknown handler {:?}", spec.handler)))
}

pub struct Runtime {
    node: NodeId,
    platform: Weak<dyn Platform>,
    functions: RwLock<HashMap<String, Arc<Function>>>,
    deploying: tokio::sync::Mutex<()>,
    handler_timeout: Mutex<Duration>,
    inflight: AtomicUsize,
    idle: Notify,
}

impl Runtime {
    pub fn new(node: NodeId, platform: Weak<dyn Platform>) -> Arc<Runtime> {
        Arc::new(Runtime {
            node,
            platform,
            functions: RwLock::new(HashMap::new()),
            deploying: tokio::sync::Mutex::new(()),
            handler_timeout: Mutex::new(HANDLER_TIMEOUT),
            inflight: AtomicUsize::new(0),
            idle: Notify::new(),
        })
    }

    pub fn node(&self) -> &NodeId {
        &self.node
    }

    pub fn set_handler_timeout(&self, timeout: Duration) {
        *self.handler_timeout.lock() = timeout;
    }

    fn platform(&self) -> Result<Arc<dyn Platform>> {
        self.platform
            .upgrade()
            .ok_or_else(|| EnokiError::unavailable("node is shutting down"))
    }

    pub fn functions(&self) -> Vec<String> {
        let mut names: Vec<String> = self.functions.read().keys().cloned().collect();
        names.sort();
        names
    }

    pub fn spec(&self, name: &str) -> Option<FunctionSpec> {
        self.functions.read().get(name).map(|f| f.spec.clone())
    }

    /// Deploys a function. Redeploying an identical spec is a no-op that
    /// returns the original result; a different spec under a taken name
    /// is a conflict.
    pub async fn deploy(&self, spec: FunctionSpec) -> Result<DeploymentResult> {
        spec.validate()?;
        let _guard = self.deploying.lock().await;
        if let Some(existing) = self.functions.read().get(&spec.name) {
            if existing.spec == spec {
                return Ok(existing.result.clone());
            }
            return Err(EnokiError::conflict(format!(
                "function {} already deployed with a different spec",
                spec.name
            )));
        }
        let handler = resolve_handler(&spec).await?;
        let keygroup = spec.keygroup_name()?;
        let (result, endpoint) = self
            .platform()?
            .prepare_keygroup(&keygroup, spec.replicate_from_existing)
            .await?;
        let function = Function {
            result: result.clone(),
            handler,
            endpoint,
            keygroup,
            env: Arc::new(spec.env.clone()),
            slots: Arc::new(Semaphore::new(spec.threads as usize)),
            admitted: AtomicUsize::new(0),
            spec,
        };
        log::info!(
            "deployed {} ({}, threads={}) {:?}",
            function.spec.name,
            function.spec.handler,
            function.spec.threads,
            result
        );
        self.functions
            .write()
            .insert(function.spec.name.clone(), Arc::new(function));
        Ok(result)
    }

    /// Runs `function`. Sync calls return the output; async calls return
    /// `None` as soon as the invocation is queued.
    pub async fn invoke(self: &Arc<Self>, function: &str, input: Bytes, mode: InvokeMode, depth: u32) -> Result<Option<Bytes>> {
        let inv = Invocation {
            function: function.to_owned(),
            input,
            mode,
            depth,
            received_ts: Timestamp::now(),
        };
        self.submit(inv).await
    }

    pub async fn submit(self: &Arc<Self>, inv: Invocation) -> Result<Option<Bytes>> {
        if inv.depth > MAX_CALL_DEPTH {
            return Err(EnokiError::bad_request(format!(
                "nested call depth exceeds {MAX_CALL_DEPTH}"
            )));
        }
        let f = self
            .functions
            .read()
            .get(&inv.function)
            .cloned()
            .ok_or_else(|| EnokiError::not_found(format!("function {}", inv.function)))?;
        let limit = f.spec.threads as usize + QUEUE_CAPACITY;
        if f.admitted.fetch_add(1, Ordering::AcqRel) >= limit {
            f.admitted.fetch_sub(1, Ordering::AcqRel);
            return Err(EnokiError::unavailable(format!("queue for {} is full", inv.function)));
        }
        self.inflight.fetch_add(1, Ordering::AcqRel);
        let admission = Admission {
            runtime: self.clone(),
            function: f.clone(),
        };
        match inv.mode {
            InvokeMode::Sync => {
                let out = self.run(&f, inv).await;
                drop(admission);
                out.map(Some)
            }
            InvokeMode::Async => {
                let rt = self.clone();
                tokio::spawn(async move {
                    let name = inv.function.clone();
                    if let Err(e) = rt.run(&f, inv).await {
                        log::warn!("async invocation of {name} failed: {e}");
                    }
                    drop(admission);
                });
                Ok(None)
            }
        }
    }

    async fn run(self: &Arc<Self>, f: &Arc<Function>, inv: Invocation) -> Result<Bytes> {
        let _slot = f.slots.acquire().await.expect("slots never close");
        let ctx = HandlerContext {
            kv: Session::new(f.keygroup.clone(), f.endpoint.clone()),
            self_node: self.node.clone(),
            function: inv.function.clone(),
            env: f.env.clone(),
            runtime: self.clone(),
            depth: inv.depth,
        };
        let limit = *self.handler_timeout.lock();
        match tokio::time::timeout(limit, f.handler.call(inv.input, &ctx)).await {
            Err(_) => Err(EnokiError::timeout(format!(
                "{} exceeded {} ms",
                inv.function,
                limit.as_millis()
            ))),
            Ok(Ok(out)) => Ok(out),
            Ok(Err(e)) if e.kind == ErrorKind::Timeout || e.kind == ErrorKind::Internal => Err(e),
            Ok(Err(e)) => Err(EnokiError::internal(format!("{} failed: {e}", inv.function))),
        }
    }

    /// Waits until no invocation is running or queued, up to `limit`.
    /// Returns whether the runtime went idle in time.
    pub async fn drain(&self, limit: Duration) -> bool {
        let wait = async {
            loop {
                let notified = self.idle.notified();
                if self.inflight.load(Ordering::Acquire) == 0 {
                    return;
                }
                notified.await;
            }
        };
        tokio::time::timeout(limit, wait).await.is_ok()
    }
}

/// Releases an invocation's queue place when it finishes.
struct Admission {
    runtime: Arc<Runtime>,
    function: Arc<Function>,
}

impl Drop for Admission {
    fn drop(&mut self) {
        self.function.admitted.fetch_sub(1, Ordering::AcqRel);
        if self.runtime.inflight.fetch_sub(1, Ordering::AcqRel) == 1 {
            self.runtime.idle.notify_waiters();
        }
    }
}

/// Platform backed by a single local store, for running functions without
/// a cluster.
pub struct StandalonePlatform {
    store: Arc<crate::kvstore::KvStore>,
}

impl StandalonePlatform {
    pub fn new(store: Arc<crate::kvstore::KvStore>) -> Arc<StandalonePlatform> {
        Arc::new(StandalonePlatform { store })
    }
}

#[async_trait]
impl Platform for StandalonePlatform {
    async fn prepare_keygroup(&self, kg: &KeygroupName, _replicate: bool) -> Result<(DeploymentResult, Arc<dyn KvEndpoint>)> {
        let created = match self.store.create_keygroup(kg) {
            Ok(_) => true,
            Err(e) if e.is(ErrorKind::AlreadyExists) => false,
            Err(e) => return Err(e),
        };
        let endpoint = Arc::new(crate::session::LocalEndpoint::new(self.store.clone(), None));
        Ok((
            DeploymentResult {
                created_keygroup: created,
                ..Default::default()
            },
            endpoint,
        ))
    }

    async fn remote_invoke(&self, node: &NodeId, function: &str, _: Bytes, _: InvokeMode, _: u32) -> Result<Option<Bytes>> {
        Err(EnokiError::unavailable(format!("cannot reach {node} to call {function}")))
    }
}

/// A runtime over a [`StandalonePlatform`]. The platform must be kept alive
/// alongside the runtime.
pub fn standalone(node: &NodeId) -> (Arc<StandalonePlatform>, Arc<Runtime>) {
    let store = Arc::new(crate::kvstore::KvStore::new(node.clone()));
    let platform = StandalonePlatform::new(store);
    let weak: Weak<dyn Platform> = Arc::downgrade(&(platform.clone() as Arc<dyn Platform>));
    (platform, Runtime::new(node.clone(), weak))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicUsize;
    use std::time::Instant;

    fn rt() -> (Arc<StandalonePlatform>, Arc<Runtime>) {
        standalone(&NodeId::new("edge-1").unwrap())
    }

    async fn sync(rt: &Arc<Runtime>, f: &str, input: &str) -> Result<Bytes> {
        rt.invoke(f, Bytes::copy_from_slice(input.as_bytes()), InvokeMode::Sync, 0)
            .await
            .map(|o| o.unwrap())
    }

    struct Gate {
        running: AtomicUsize,
        peak: AtomicUsize,
    }

    #[async_trait]
    impl Handler for Gate {
        async fn call(&self, _input: Bytes, _ctx: &HandlerContext) -> Result<Bytes> {
            let now = self.running.fetch_add(1, Ordering::SeqCst) + 1;
            self.peak.fetch_max(now, Ordering::SeqCst);
            tokio::time::sleep(Duration::from_millis(20)).await;
            self.running.fetch_sub(1, Ordering::SeqCst);
            Ok(Bytes::new())
        }
    }

    fn install(rt: &Runtime, name: &str, threads: u32, handler: Arc<dyn Handler>) {
        let spec = FunctionSpec::new(name, "custom").threads(threads);
        let store = Arc::new(crate::kvstore::KvStore::new(rt.node.clone()));
        let kg = spec.keygroup_name().unwrap();
        store.create_keygroup(&kg).unwrap();
        rt.functions.write().insert(
            name.into(),
            Arc::new(Function {
                result: DeploymentResult::default(),
                handler,
                endpoint: Arc::new(crate::session::LocalEndpoint::new(store, None)),
                keygroup: kg,
                env: Arc::new(BTreeMap::new()),
                slots: Arc::new(Semaphore::new(threads as usize)),
                admitted: AtomicUsize::new(0),
                spec,
            }),
        );
    }

    #[tokio::test]
    async fn deploy_and_invoke_echo() {
        let (_p, rt) = rt();
        let res = rt.deploy(FunctionSpec::new("echo", "echo")).await.unwrap();
        assert!(res.created_keygroup);
        assert_eq!(sync(&rt, "echo", "x").await.unwrap(), "x");
        assert!(sync(&rt, "nope", "x").await.unwrap_err().is(ErrorKind::NotFound));
    }

    #[tokio::test]
    async fn deploy_is_idempotent_and_detects_conflicts() {
        let (_p, rt) = rt();
        let spec = FunctionSpec::new("avg", "movavg");
        let first = rt.deploy(spec.clone()).await.unwrap();
        assert_eq!(rt.deploy(spec.clone()).await.unwrap(), first);
        let err = rt.deploy(spec.threads(4)).await.unwrap_err();
        assert!(err.is(ErrorKind::Conflict));
        let err = rt.deploy(FunctionSpec::new("bad", "nope")).await.unwrap_err();
        assert!(err.is(ErrorKind::BadRequest));
        assert_eq!(rt.functions(), vec!["avg".to_string()]);
        assert!(rt.deploy(FunctionSpec::new("x", "echo").threads(0)).await.is_err());
        assert!(rt.deploy(FunctionSpec::new("a b", "echo")).await.is_err());
    }

    #[tokio::test]
    async fn threads_bound_concurrency() {
        let (_p, rt) = rt();
        let gate = Arc::new(Gate {
            running: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        });
        install(&rt, "gate", 3, gate.clone());
        let calls: Vec<_> = (0..12).map(|_| sync(&rt, "gate", "")).collect();
        for r in futures::future::join_all(calls).await {
            r.unwrap();
        }
        assert_eq!(gate.peak.load(Ordering::SeqCst), 3);
    }

    struct Slow;

    #[async_trait]
    impl Handler for Slow {
        async fn call(&self, input: Bytes, _ctx: &HandlerContext) -> Result<Bytes> {
            tokio::time::sleep(Duration::from_millis(100)).await;
            if input == "fail" {
                return Err(EnokiError::bad_request("boom"));
            }
            Ok(input)
        }
    }

    #[tokio::test]
    async fn async_returns_before_completion() {
        let (_p, rt) = rt();
        install(&rt, "slow", 1, Arc::new(Slow));
        let t = Instant::now();
        let out = rt.invoke("slow", Bytes::new(), InvokeMode::Async, 0).await.unwrap();
        assert!(out.is_none());
        assert!(t.elapsed() < Duration::from_millis(50));
        assert!(rt.drain(Duration::from_secs(2)).await);
        assert!(t.elapsed() >= Duration::from_millis(100));
    }

    #[tokio::test]
    async fn handler_errors_are_internal_and_free_the_slot() {
        let (_p, rt) = rt();
        install(&rt, "slow", 1, Arc::new(Slow));
        assert!(sync(&rt, "slow", "fail").await.unwrap_err().is(ErrorKind::Internal));
        assert_eq!(sync(&rt, "slow", "ok").await.unwrap(), "ok");
    }

    #[tokio::test]
    async fn handler_timeout() {
        let (_p, rt) = rt();
        rt.set_handler_timeout(Duration::from_millis(30));
        install(&rt, "slow", 1, Arc::new(Slow));
        assert!(sync(&rt, "slow", "x").await.unwrap_err().is(ErrorKind::Timeout));
    }

    struct SelfCall;

    #[async_trait]
    impl Handler for SelfCall {
        async fn call(&self, _input: Bytes, ctx: &HandlerContext) -> Result<Bytes> {
            ctx.call("selfcall", "again", InvokeMode::Sync).await?;
            Ok(Bytes::new())
        }
    }

    #[tokio::test]
    async fn self_call_with_one_slot_times_out() {
        let (_p, rt) = rt();
        rt.set_handler_timeout(Duration::from_millis(100));
        install(&rt, "selfcall", 1, Arc::new(SelfCall));
        assert!(sync(&rt, "selfcall", "").await.unwrap_err().is(ErrorKind::Timeout));
    }

    #[tokio::test]
    async fn nested_depth_is_capped() {
        let (_p, rt) = rt();
        install(&rt, "selfcall", 64, Arc::new(SelfCall));
        let err = sync(&rt, "selfcall", "").await.unwrap_err();
        assert!(err.detail.contains("depth"), "{err}");
    }

    #[tokio::test]
    async fn spec_json_defaults() {
        let spec: FunctionSpec = serde_json::from_str(r#"{"name":"f","handler":"echo"}"#).unwrap();
        assert_eq!(spec, FunctionSpec::new("f", "echo"));
        assert_eq!(spec.keygroup_name().unwrap().as_str(), "f");
        let res = DeploymentResult {
            created_keygroup: true,
            ..Default::default()
        };
        assert_eq!(serde_json::to_string(&res).unwrap(), r#"{"created_keygroup":true}"#);
    }
}
