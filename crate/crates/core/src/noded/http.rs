//! Public HTTP API: deploy and invoke functions.

use std::collections::BTreeMap;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use serde::Deserialize;
use tokio::net::TcpListener;
use tokio::sync::Notify;

use super::Node;
use crate::error::{EnokiError, ErrorKind};
use crate::ids::KeygroupName;
use crate::proto::InvokeMode;
use crate::runtime::FunctionSpec;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeployBody {
    pub handler: String,
    #[serde(default)]
    pub threads: Option<u32>,
    #[serde(default)]
    pub keygroup: Option<KeygroupName>,
    #[serde(default)]
    pub replicate_from_existing: Option<bool>,
    #[serde(default)]
    pub env: BTreeMap<String, String>,
}

impl DeployBody {
    pub fn into_spec(self, name: String) -> FunctionSpec {
        FunctionSpec {
            name,
            handler: self.handler,
            threads: self.threads.unwrap_or(1),
            keygroup: self.keygroup,
            replicate_from_existing: self.replicate_from_existing.unwrap_or(true),
            env: self.env,
        }
    }
}

pub fn status_of(kind: ErrorKind) -> StatusCode {
    match kind {
        ErrorKind::NotFound => StatusCode::NOT_FOUND,
        ErrorKind::AlreadyExists | ErrorKind::Conflict => StatusCode::CONFLICT,
        ErrorKind::BadRequest => StatusCode::BAD_REQUEST,
        ErrorKind::Unavailable => StatusCode::SERVICE_UNAVAILABLE,
        ErrorKind::Timeout => StatusCode::GATEWAY_TIMEOUT,
        ErrorKind::Internal => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

struct ApiError(EnokiError);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (status_of(self.0.kind), format!("{}\n", self.0)).into_response()
    }
}

impl From<EnokiError> for ApiError {
    fn from(e: EnokiError) -> Self {
        ApiError(e)
    }
}

pub fn router(node: Arc<Node>) -> Router {
    Router::new()
        .route("/health", get(|| async { "ok" }))
        .route("/functions", get(list))
        .route("/functions/{name}", put(deploy).post(invoke_sync))
        .route("/functions/{name}/async", post(invoke_async))
        .with_state(node)
}

pub async fn serve(listener: TcpListener, node: Arc<Node>, stop: Arc<Notify>) {
    let app = router(node);
    let shutdown = async move { stop.notified().await };
    if let Err(e) = axum::serve(listener, app).with_graceful_shutdown(shutdown).await {
        log::error!("HTTP server failed: {e}");
    }
}

async fn list(State(node): State<Arc<Node>>) -> Json<Vec<String>> {
    Json(node.runtime().functions())
}

async fn deploy(
    State(node): State<Arc<Node>>,
    Path(name): Path<String>,
    body: Bytes,
) -> Result<Json<crate::runtime::DeploymentResult>, ApiError> {
    let body: DeployBody = serde_json::from_slice(&body)
        .map_err(|e| EnokiError::bad_request(format!("invalid deploy body: {e}")))?;
    Ok(Json(node.deploy(body.into_spec(name)).await?))
}

async fn invoke_sync(
    State(node): State<Arc<Node>>,
    Path(name): Path<String>,
    body: Bytes,
) -> Result<Vec<u8>, ApiError> {
    let out = node.invoke(&name, body, InvokeMode::Sync).await?;
    Ok(out.unwrap_or_default().to_vec())
}

async fn invoke_async(
    State(node): State<Arc<Node>>,
    Path(name): Path<String>,
    body: Bytes,
) -> Result<StatusCode, ApiError> {
    node.invoke(&name, body, InvokeMode::Async).await?;
    Ok(StatusCode::ACCEPTED)
}
