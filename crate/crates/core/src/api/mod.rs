//! HTTP surface: native inference routes and OpenAI-compatible routes.

mod compat;
mod native;

use std::sync::Arc;
use std::time::Duration;

use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::{json, Value as JsonValue};
use subtle::ConstantTimeEq;
use thiserror::Error;

use crate::config::Config;
use crate::engine::Engine;
use crate::error::EngineError;
use crate::events::DEFAULT_DRAIN_IDLE;

pub use self::compat::SseFlavor;

/// Model id advertised on `/v1/models`.
pub const MODEL_ID: &str = "sql-query-engine";
/// Characters of raw LLM output echoed back on a parse failure.
pub const PARSE_EXCERPT_CHARS: usize = 500;

#[derive(Clone)]
pub struct AppState {
    pub engine: Engine,
    /// Defaults that per-request connection parameters are merged onto.
    pub config: Arc<Config>,
    pub drain_idle: Duration,
}

impl AppState {
    pub fn new(engine: Engine, config: Config) -> Self {
        Self { engine, config: Arc::new(config), drain_idle: DEFAULT_DRAIN_IDLE }
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/inference/sqlQueryEngine/{chat_id}", post(native::engine))
        .route("/inference/sqlQueryGeneration/{chat_id}", post(native::generation))
        .route("/inference/sqlQueryEvaluation/{chat_id}", post(native::evaluation))
        .route("/v1/models", get(compat::models))
        .route("/v1/chat/completions", post(compat::chat_completions))
        .route("/v1/completions", post(compat::completions))
        .with_state(state)
}

/// Serves `router(state)` on `addr` until the process ends.
pub async fn serve(state: AppState, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(%addr, "listening");
    axum::serve(listener, router(state)).await
}

/// Allows when no keys are configured or the header is `Bearer <k>` for a
/// configured `k`. Every key is compared in constant time.
pub fn check_bearer(header: Option<&str>, keys: &[String]) -> bool {
    if keys.is_empty() {
        return true;
    }
    let Some(token) = header.and_then(|h| h.strip_prefix("Bearer ")) else {
        return false;
    };
    let mut ok = subtle::Choice::from(0u8);
    for k in keys {
        ok |= token.as_bytes().ct_eq(k.as_bytes());
    }
    ok.into()
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ChatIdError {
    #[error("the conversation has no user message")]
    NoUserMessage,
}

/// The body's `chat_id` (top level, then `metadata.chat_id`), else the
/// lowercase hex MD5 of the first user message.
pub fn resolve_chat_id(body: &JsonValue) -> Result<String, ChatIdError> {
    let explicit = body
        .get("chat_id")
        .or_else(|| body.get("metadata").and_then(|m| m.get("chat_id")))
        .and_then(JsonValue::as_str)
        .filter(|s| !s.trim().is_empty());
    if let Some(id) = explicit {
        return Ok(id.to_string());
    }
    let first_user = body
        .get("messages")
        .and_then(JsonValue::as_array)
        .into_iter()
        .flatten()
        .find(|m| m.get("role").and_then(JsonValue::as_str) == Some("user"))
        .and_then(|m| m.get("content"))
        .map(compat::content_text)
        .ok_or(ChatIdError::NoUserMessage)?;
    Ok(format!("{:x}", md5::compute(first_user.as_bytes())))
}

/// HTTP status and JSON detail for a pipeline failure.
pub fn error_status(e: &EngineError) -> (StatusCode, JsonValue) {
    match e {
        EngineError::Parse(p) => (
            StatusCode::UNPROCESSABLE_ENTITY,
            json!({"error": "parse_failed", "message": e.to_string(), "excerpt": p.excerpt(PARSE_EXCERPT_CHARS)}),
        ),
        _ => match e.backend() {
            Some(backend) => (
                StatusCode::BAD_GATEWAY,
                json!({"error": "backend_unavailable", "backend": backend, "message": e.to_string()}),
            ),
            None => (StatusCode::BAD_REQUEST, json!({"error": "invalid_request", "message": e.to_string()})),
        },
    }
}

pub(crate) struct ApiError(pub StatusCode, pub JsonValue);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        let (status, body) = error_status(&e);
        ApiError(status, body)
    }
}

pub(crate) fn bad_request(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, json!({"error": "invalid_request", "message": msg.into()}))
}

pub(crate) fn authorization(headers: &HeaderMap) -> Option<&str> {
    headers.get(axum::http::header::AUTHORIZATION).and_then(|v| v.to_str().ok())
}
