#![allow(clippy::result_large_err)]

use axum::body::Bytes;
use axum::extract::rejection::QueryRejection;
use axum::extract::{Path, Query, State};
use axum::Json;
use serde::Deserialize;

use super::{bad_request, ApiError, AppState};
use crate::db::ConnectionParams;
use crate::engine::{Engine, PipelineOutcome, RunOptions};
use crate::error::EngineError;
use crate::evaluator::EvaluationOutcome;
use crate::generator::{GenerationOutcome, SchemaContext};
use crate::llm::LlmParams;
use crate::session::KvParams;

/// Query parameters shared by the three native routes. Connection fields
/// left out fall back to the server's configuration.
#[derive(Debug, Default, Deserialize)]
#[serde(rename_all = "camelCase")]
pub(super) struct NativeParams {
    base_prompt: Option<String>,
    query: Option<String>,
    retry_count: Option<usize>,
    feedback_examples: Option<usize>,
    row_limit: Option<usize>,
    schema_description_key: Option<String>,
    llm_base_url: Option<String>,
    llm_model: Option<String>,
    llm_api_key: Option<String>,
    llm_temperature: Option<f64>,
    pg_host: Option<String>,
    pg_port: Option<u16>,
    pg_dbname: Option<String>,
    pg_user: Option<String>,
    pg_password: Option<String>,
    kv_host: Option<String>,
    kv_port: Option<u16>,
    kv_password: Option<String>,
    kv_db: Option<i64>,
}

#[derive(Debug, Default, Deserialize)]
struct EvaluationBody {
    payload: Option<SchemaContext>,
}

impl NativeParams {
    fn options(&self) -> RunOptions {
        RunOptions {
            retry_count: self.retry_count,
            feedback_examples: self.feedback_examples,
            row_limit: self.row_limit,
            schema_key: self.schema_description_key.clone(),
        }
    }

    fn llm(&self, base: &LlmParams) -> Option<LlmParams> {
        let any = self.llm_base_url.is_some()
            || self.llm_model.is_some()
            || self.llm_api_key.is_some()
            || self.llm_temperature.is_some();
        any.then(|| LlmParams {
            base_url: self.llm_base_url.clone().unwrap_or_else(|| base.base_url.clone()),
            model: self.llm_model.clone().unwrap_or_else(|| base.model.clone()),
            api_key: self.llm_api_key.clone().unwrap_or_else(|| base.api_key.clone()),
            temperature: self.llm_temperature.unwrap_or(base.temperature),
            timeout_secs: base.timeout_secs,
        })
    }

    fn db(&self, base: &ConnectionParams) -> Option<ConnectionParams> {
        let any = self.pg_host.is_some()
            || self.pg_port.is_some()
            || self.pg_dbname.is_some()
            || self.pg_user.is_some()
            || self.pg_password.is_some();
        any.then(|| ConnectionParams {
            host: self.pg_host.clone().unwrap_or_else(|| base.host.clone()),
            port: self.pg_port.unwrap_or(base.port),
            dbname: self.pg_dbname.clone().unwrap_or_else(|| base.dbname.clone()),
            user: self.pg_user.clone().unwrap_or_else(|| base.user.clone()),
            password: self.pg_password.clone().unwrap_or_else(|| base.password.clone()),
        })
    }

    fn kv(&self, base: &KvParams) -> Option<KvParams> {
        let any =
            self.kv_host.is_some() || self.kv_port.is_some() || self.kv_password.is_some() || self.kv_db.is_some();
        any.then(|| KvParams {
            host: self.kv_host.clone().unwrap_or_else(|| base.host.clone()),
            port: self.kv_port.unwrap_or(base.port),
            password: self.kv_password.clone().unwrap_or_else(|| base.password.clone()),
            db: self.kv_db.unwrap_or(base.db),
        })
    }

    fn engine(&self, state: &AppState) -> Result<Engine, EngineError> {
        let cfg = &state.config;
        let (llm, db, kv) = (self.llm(&cfg.llm), self.db(&cfg.db), self.kv(&cfg.kv));
        if llm.is_none() && db.is_none() && kv.is_none() {
            return Ok(state.engine.clone());
        }
        state.engine.with_overrides(llm, db, kv)
    }

    fn base_prompt(&self) -> Result<String, ApiError> {
        match self.base_prompt.as_deref().map(str::trim) {
            Some(p) if !p.is_empty() => Ok(p.to_string()),
            _ => Err(bad_request("basePrompt is required")),
        }
    }
}

fn params(q: Result<Query<NativeParams>, QueryRejection>) -> Result<NativeParams, ApiError> {
    q.map(|Query(p)| p).map_err(|e| bad_request(e.body_text()))
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, EngineError> + Send + 'static,
) -> Result<T, ApiError> {
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map_err(ApiError::from),
        Err(e) => Err(ApiError(
            axum::http::StatusCode::INTERNAL_SERVER_ERROR,
            serde_json::json!({"error": "internal", "message": e.to_string()}),
        )),
    }
}

pub(super) async fn engine(
    State(state): State<AppState>,
    Path(chat_id): Path<String>,
    q: Result<Query<NativeParams>, QueryRejection>,
) -> Result<Json<PipelineOutcome>, ApiError> {
    let p = params(q)?;
    let prompt = p.base_prompt()?;
    let engine = p.engine(&state)?;
    let opts = p.options();
    Ok(Json(blocking(move || engine.run_with(&chat_id, &prompt, &opts)).await?))
}

pub(super) async fn generation(
    State(state): State<AppState>,
    Path(chat_id): Path<String>,
    q: Result<Query<NativeParams>, QueryRejection>,
) -> Result<Json<GenerationOutcome>, ApiError> {
    let p = params(q)?;
    let prompt = p.base_prompt()?;
    let engine = p.engine(&state)?;
    let opts = p.options();
    Ok(Json(blocking(move || engine.generate(&chat_id, &prompt, &opts)).await?))
}

/// Repairs the `query` parameter. An optional JSON body
/// `{"payload": SchemaContext}` supplies the schema context directly.
pub(super) async fn evaluation(
    State(state): State<AppState>,
    Path(chat_id): Path<String>,
    q: Result<Query<NativeParams>, QueryRejection>,
    body: Bytes,
) -> Result<Json<EvaluationOutcome>, ApiError> {
    let p = params(q)?;
    let query = match p.query.as_deref().map(str::trim) {
        Some(s) if !s.is_empty() => s.to_string(),
        _ => return Err(bad_request("query is required")),
    };
    let prompt = p.base_prompt.clone().unwrap_or_default();
    let body: EvaluationBody = if body.iter().all(u8::is_ascii_whitespace) {
        EvaluationBody::default()
    } else {
        serde_json::from_slice(&body).map_err(|e| bad_request(format!("invalid body: {e}")))?
    };
    let engine = p.engine(&state)?;
    let opts = p.options();
    Ok(Json(blocking(move || engine.evaluate(&chat_id, &query, &prompt, body.payload, &opts)).await?))
}
