//! Handlers compiled into the runtime.

use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use bytes::Bytes;
use rand::RngCore;

use super::{Handler, HandlerContext};
use crate::error::{EnokiError, ErrorKind, Result};
use crate::proto::InvokeMode;

const CATALOG: [&str; 13] = [
    "echo",
    "movavg",
    "readn",
    "writen",
    "rwitem",
    "weathersensorfilter",
    "trafficsensorfilter",
    "objectrecognition",
    "movementplan",
    "trafficstatistics",
    "airqualityaggregator",
    "emergencydetection",
    "lightphasecalculation",
];

/// Number of values the moving average covers.
pub const WINDOW: u64 = 10;
/// Simulated compute time of the stateless smart-city functions.
pub const COMPUTE_TIME: Duration = Duration::from_millis(1);

pub fn list_builtins() -> Vec<&'static str> {
    CATALOG.to_vec()
}

pub fn builtin(name: &str) -> Option<Arc<dyn Handler>> {
    let h: Arc<dyn Handler> = match name {
        "echo" => Arc::new(Echo),
        "movavg" => Arc::new(MovAvg),
        "readn" => Arc::new(ReadN),
        "writen" => Arc::new(WriteN),
        "rwitem" => Arc::new(RwItem),
        "weathersensorfilter" => Arc::new(SensorFilter::Weather),
        "trafficsensorfilter" => Arc::new(SensorFilter::Traffic),
        "objectrecognition" => Arc::new(ObjectRecognition),
        "movementplan" => Arc::new(MovementPlan),
        "trafficstatistics" | "airqualityaggregator" => Arc::new(Counter),
        "emergencydetection" | "lightphasecalculation" => Arc::new(Compute),
        _ => return None,
    };
    Some(h)
}

fn text(input: &Bytes) -> Result<&str> {
    std::str::from_utf8(input).map_err(|_| EnokiError::bad_request("input is not UTF-8"))
}

fn parse<T: std::str::FromStr>(input: &Bytes) -> Result<T> {
    let s = text(input)?.trim();
    s.parse()
        .map_err(|_| EnokiError::bad_request(format!("cannot parse input {s:?}")))
}

async fn get_or_default(ctx: &HandlerContext, key: &str) -> Result<Option<Bytes>> {
    match ctx.kv.get(key).await {
        Ok(v) => Ok(Some(v)),
        Err(e) if e.is(ErrorKind::NotFound) => Ok(None),
        Err(e) => Err(e),
    }
}

struct Echo;

#[async_trait]
impl Handler for Echo {
    async fn call(&self, input: Bytes, _ctx: &HandlerContext) -> Result<Bytes> {
        Ok(input)
    }
}

pub fn value_key(i: u64) -> String {
    format!("v-{i:06}")
}

/// Renders a mean so whole numbers keep one decimal place ("4.0").
pub fn format_mean(mean: f64) -> String {
    format!("{mean:?}")
}

/// Appends the input to a series and returns the mean of the last ten
/// values: get pointer, write value, write pointer, scan window.
struct MovAvg;

#[async_trait]
impl Handler for MovAvg {
    async fn call(&self, input: Bytes, ctx: &HandlerContext) -> Result<Bytes> {
        parse::<f64>(&input)?;
        let ptr: u64 = match get_or_default(ctx, "ptr").await? {
            Some(raw) => parse(&raw)?,
            None => 0,
        };
        let n = ptr + 1;
        ctx.kv.set(&value_key(n), input).await?;
        ctx.kv.set("ptr", n.to_string()).await?;
        let first = n.saturating_sub(WINDOW - 1).max(1);
        let window = ctx.kv.scan(&value_key(first), (n - first + 1) as usize).await?;
        let values = window
            .iter()
            .map(|(_, v)| parse::<f64>(v))
            .collect::<Result<Vec<_>>>()?;
        if values.is_empty() {
            return Err(EnokiError::internal("moving average window is empty"));
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        Ok(Bytes::from(format_mean(mean)))
    }
}

/// Reads the pre-seeded `blob` key without returning it.
struct ReadN;

#[async_trait]
impl Handler for ReadN {
    async fn call(&self, input: Bytes, ctx: &HandlerContext) -> Result<Bytes> {
        parse::<usize>(&input)?;
        ctx.kv.get("blob").await?;
        Ok(Bytes::from_static(b"ok"))
    }
}

struct WriteN;

#[async_trait]
impl Handler for WriteN {
    async fn call(&self, input: Bytes, ctx: &HandlerContext) -> Result<Bytes> {
        let n: usize = parse(&input)?;
        let mut data = vec![0u8; n];
        rand::rng().fill_bytes(&mut data);
        ctx.kv.set("blob", data).await?;
        Ok(Bytes::from_static(b"ok"))
    }
}

/// `r` reads `item`; `w|<payload>` overwrites it.
struct RwItem;

#[async_trait]
impl Handler for RwItem {
    async fn call(&self, input: Bytes, ctx: &HandlerContext) -> Result<Bytes> {
        if &input[..] == b"r" {
            return ctx.kv.get("item").await;
        }
        if input.starts_with(b"w|") {
            ctx.kv.set("item", input.slice(2..)).await?;
            return Ok(Bytes::from_static(b"ok"));
        }
        Err(EnokiError::bad_request("expected `r` or `w|<payload>`"))
    }
}

/// Flags carried in smart-city inputs, e.g. `pass=1;plan=0`.
pub fn flag(input: &Bytes, name: &str) -> bool {
    std::str::from_utf8(input)
        .unwrap_or("")
        .split(';')
        .filter_map(|kv| kv.split_once('='))
        .any(|(k, v)| k.trim() == name && v.trim() == "1")
}

enum SensorFilter {
    Weather,
    Traffic,
}

#[async_trait]
impl Handler for SensorFilter {
    async fn call(&self, input: Bytes, ctx: &HandlerContext) -> Result<Bytes> {
        if !flag(&input, "pass") {
            return Ok(Bytes::from_static(b"filtered"));
        }
        match self {
            SensorFilter::Weather => {
                ctx.call("airqualityaggregator", input, InvokeMode::Async).await?;
            }
            SensorFilter::Traffic => {
                ctx.call("movementplan", input.clone(), InvokeMode::Sync).await?;
                ctx.call("trafficstatistics", input, InvokeMode::Async).await?;
            }
        }
        Ok(Bytes::from_static(b"passed"))
    }
}

struct ObjectRecognition;

#[async_trait]
impl Handler for ObjectRecognition {
    async fn call(&self, input: Bytes, ctx: &HandlerContext) -> Result<Bytes> {
        ctx.call("emergencydetection", input.clone(), InvokeMode::Sync).await?;
        if flag(&input, "plan") {
            ctx.call("movementplan", input, InvokeMode::Sync).await?;
            return Ok(Bytes::from_static(b"planned"));
        }
        Ok(Bytes::from_static(b"recognized"))
    }
}

/// Four kv operations: get state, scan recent plans, store a new plan,
/// store the new state. Then triggers the light phase calculation.
struct MovementPlan;

#[async_trait]
impl Handler for MovementPlan {
    async fn call(&self, input: Bytes, ctx: &HandlerContext) -> Result<Bytes> {
        let state: u64 = match get_or_default(ctx, "state").await? {
            Some(raw) => parse(&raw)?,
            None => 0,
        };
        let first = state.saturating_sub(WINDOW - 1).max(1);
        let count = (state + 1 - first).max(1) as usize;
        let recent = ctx.kv.scan(&format!("p-{first:06}"), count).await?;
        let n = state + 1;
        ctx.kv.set(&format!("p-{n:06}"), input.clone()).await?;
        ctx.kv.set("state", n.to_string()).await?;
        ctx.call("lightphasecalculation", input, InvokeMode::Async).await?;
        Ok(Bytes::from(format!("plan {n} after {}", recent.len())))
    }
}

/// One get and one set of a running counter.
struct Counter;

#[async_trait]
impl Handler for Counter {
    async fn call(&self, _input: Bytes, ctx: &HandlerContext) -> Result<Bytes> {
        let count: u64 = match get_or_default(ctx, "count").await? {
            Some(raw) => parse(&raw)?,
            None => 0,
        };
        let count = (count + 1).to_string();
        ctx.kv.set("count", count.clone()).await?;
        Ok(Bytes::from(count))
    }
}

/// Stateless work.
struct Compute;

#[async_trait]
impl Handler for Compute {
    async fn call(&self, _input: Bytes, _ctx: &HandlerContext) -> Result<Bytes> {
        tokio::time::sleep(COMPUTE_TIME).await;
        Ok(Bytes::from_static(b"done"))
    }
}
