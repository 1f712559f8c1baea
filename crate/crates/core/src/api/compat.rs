#![allow(clippy::result_large_err)]

use std::convert::Infallible;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use axum::body::{Body, Bytes};
use axum::extract::State;
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde_json::{json, Value as JsonValue};
use tokio::sync::mpsc;
use tokio_stream::wrappers::ReceiverStream;

use super::{authorization, check_bearer, error_status, resolve_chat_id, ApiError, AppState, MODEL_ID};
use crate::engine::{Engine, RunOptions};
use crate::error::EngineError;
use crate::events::{parse_frame, stream_channel, EventBus, Subscription};

/// Response shape of a compat route.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SseFlavor {
    Chat,
    Completion,
}

/// Text of an OpenAI message `content`: a string, or the `text` parts of a
/// content-part array joined by newlines.
pub(super) fn content_text(v: &JsonValue) -> String {
    match v {
        JsonValue::String(s) => s.clone(),
        JsonValue::Array(parts) => {
            parts.iter().filter_map(|p| p.get("text").and_then(JsonValue::as_str)).collect::<Vec<_>>().join("\n")
        }
        _ => String::new(),
    }
}

fn openai_error(status: StatusCode, kind: &str, message: &str, extra: JsonValue) -> Response {
    let mut err = json!({"message": message, "type": kind, "param": null, "code": kind});
    if let (Some(obj), JsonValue::Object(more)) = (err.as_object_mut(), extra) {
        obj.extend(more);
    }
    (status, Json(json!({"error": err}))).into_response()
}

fn unauthorized() -> Response {
    openai_error(StatusCode::UNAUTHORIZED, "invalid_api_key", "missing or invalid bearer token", json!({}))
}

fn invalid(message: &str) -> Response {
    openai_error(StatusCode::BAD_REQUEST, "invalid_request_error", message, json!({}))
}

fn engine_error(e: &EngineError) -> Response {
    let (status, detail) = error_status(e);
    let kind = detail["error"].as_str().unwrap_or("error").to_string();
    let mut extra = detail;
    if let Some(o) = extra.as_object_mut() {
        o.remove("error");
        o.remove("message");
    }
    openai_error(status, &kind, &e.to_string(), extra)
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Rough token count: one token per four characters.
fn estimate_tokens(text: &str) -> usize {
    text.chars().count().div_ceil(4)
}

pub(super) async fn models(State(state): State<AppState>, headers: HeaderMap) -> Response {
    if !check_bearer(authorization(&headers), &state.config.api_keys) {
        return unauthorized();
    }
    Json(json!({
        "object": "list",
        "data": [{"id": MODEL_ID, "object": "model", "created": 0, "owned_by": "sqlqe"}],
    }))
    .into_response()
}

struct CompatRequest {
    chat_id: String,
    question: String,
    model: String,
    stream: bool,
    prompt_chars: String,
}

fn parse_chat_request(body: &JsonValue) -> Result<CompatRequest, Response> {
    let Some(messages) = body.get("messages").and_then(JsonValue::as_array) else {
        return Err(invalid("messages must be an array"));
    };
    if messages.is_empty() {
        return Err(invalid("messages must not be empty"));
    }
    let mut all = String::new();
    let mut question = None;
    for m in messages {
        let (Some(_), Some(content)) = (m.get("role").and_then(JsonValue::as_str), m.get("content")) else {
            return Err(invalid("every message needs a role and content"));
        };
        let text = content_text(content);
        all.push_str(&text);
        if m["role"] == "user" {
            question = Some(text);
        }
    }
    let Some(question) = question.filter(|q| !q.trim().is_empty()) else {
        return Err(invalid("the conversation has no user message to answer"));
    };
    let chat_id = resolve_chat_id(body).map_err(|e| invalid(&e.to_string()))?;
    Ok(CompatRequest {
        chat_id,
        question,
        model: body.get("model").and_then(JsonValue::as_str).unwrap_or(MODEL_ID).to_string(),
        stream: body.get("stream").and_then(JsonValue::as_bool).unwrap_or(false),
        prompt_chars: all,
    })
}

fn parse_body(headers: &HeaderMap, state: &AppState, body: &Bytes) -> Result<JsonValue, Response> {
    if !check_bearer(authorization(headers), &state.config.api_keys) {
        return Err(unauthorized());
    }
    let value: JsonValue = serde_json::from_slice(body).map_err(|e| invalid(&format!("malformed JSON body: {e}")))?;
    if !value.is_object() {
        return Err(invalid("the body must be a JSON object"));
    }
    Ok(value)
}

pub(super) async fn chat_completions(State(state): State<AppState>, headers: HeaderMap, body: Bytes) -> Response {
    let req = match parse_body(&headers, &state, &body).and_then(|b| parse_chat_request(&b)) {
        Ok(r) => r,
        Err(resp) => return resp,
    };
    respond(state, req, SseFlavor::Chat).await
}

/// The legacy completions route, answered as a chat with the prompt as the
/// only user message.
pub(super) async fn completions(State(state): State<AppState>, headers: HeaderMap, body: Bytes) -> Response {
    let body = match parse_body(&headers, &state, &body) {
        Ok(b) => b,
        Err(resp) => return resp,
    };
    let prompt = match body.get("prompt") {
        Some(JsonValue::String(s)) => s.clone(),
        Some(JsonValue::Array(items)) if items.len() == 1 && items[0].is_string() => {
            items[0].as_str().unwrap().to_string()
        }
        _ => return invalid("prompt must be a string"),
    };
    let mut chat = json!({"messages": [{"role": "user", "content": prompt}]});
    for k in ["model", "stream", "chat_id", "metadata"] {
        if let Some(v) = body.get(k) {
            chat[k] = v.clone();
        }
    }
    match parse_chat_request(&chat) {
        Ok(req) => respond(state, req, SseFlavor::Completion).await,
        Err(resp) => resp,
    }
}

async fn respond(state: AppState, req: CompatRequest, flavor: SseFlavor) -> Response {
    if req.stream {
        return stream(state, req, flavor);
    }
    let engine = state.engine.clone();
    let (chat_id, question) = (req.chat_id.clone(), req.question.clone());
    let outcome =
        tokio::task::spawn_blocking(move || engine.run_with(&chat_id, &question, &RunOptions::default())).await;
    let outcome = match outcome {
        Ok(Ok(o)) => o,
        Ok(Err(e)) => return engine_error(&e),
        Err(e) => return ApiError(StatusCode::INTERNAL_SERVER_ERROR, json!({"error": e.to_string()})).into_response(),
    };
    let answer = outcome.answer_markdown();
    let (prompt_tokens, completion_tokens) = (estimate_tokens(&req.prompt_chars), estimate_tokens(&answer));
    let usage = json!({
        "prompt_tokens": prompt_tokens,
        "completion_tokens": completion_tokens,
        "total_tokens": prompt_tokens + completion_tokens,
        "estimated": true,
    });
    let id = uuid::Uuid::new_v4().simple();
    let body = match flavor {
        SseFlavor::Chat => json!({
            "id": format!("chatcmpl-{id}"),
            "object": "chat.completion",
            "created": now(),
            "model": req.model,
            "choices": [{
                "index": 0,
                "message": {"role": "assistant", "content": answer},
                "logprobs": null,
                "finish_reason": "stop",
            }],
            "usage": usage,
        }),
        SseFlavor::Completion => json!({
            "id": format!("cmpl-{id}"),
            "object": "text_completion",
            "created": now(),
            "model": req.model,
            "choices": [{"index": 0, "text": answer, "logprobs": null, "finish_reason": "stop"}],
            "usage": usage,
        }),
    };
    Json(body).into_response()
}

/// Builds the `data:` frames of one streamed response.
struct ChunkWriter {
    id: String,
    created: u64,
    model: String,
    flavor: SseFlavor,
}

impl ChunkWriter {
    fn new(model: &str, flavor: SseFlavor) -> Self {
        let id = uuid::Uuid::new_v4().simple();
        let id = match flavor {
            SseFlavor::Chat => format!("chatcmpl-{id}"),
            SseFlavor::Completion => format!("cmpl-{id}"),
        };
        Self { id, created: now(), model: model.to_string(), flavor }
    }

    fn chunk(&self, content: Option<&str>, first: bool, finish: Option<&str>) -> JsonValue {
        match self.flavor {
            SseFlavor::Chat => {
                let mut delta = json!({});
                if first {
                    delta["role"] = json!("assistant");
                }
                if let Some(c) = content {
                    delta["content"] = json!(c);
                }
                json!({
                    "id": self.id,
                    "object": "chat.completion.chunk",
                    "created": self.created,
                    "model": self.model,
                    "choices": [{"index": 0, "delta": delta, "logprobs": null, "finish_reason": finish}],
                })
            }
            SseFlavor::Completion => json!({
                "id": self.id,
                "object": "text_completion",
                "created": self.created,
                "model": self.model,
                "choices": [{"index": 0, "text": content.unwrap_or(""), "logprobs": null, "finish_reason": finish}],
            }),
        }
    }

    fn frame(v: &JsonValue) -> String {
        format!("data: {v}\n\n")
    }
}

pub(super) const DONE_FRAME: &str = "data: [DONE]\n\n";
const POLL: Duration = Duration::from_millis(20);

/// Subscribes to the chat's channel, then launches the pipeline; the SSE
/// writer only ever sees what arrives over the bus plus the final answer.
fn stream(state: AppState, req: CompatRequest, flavor: SseFlavor) -> Response {
    let bus = state.engine.bus();
    let sub = match bus.subscribe(&req.chat_id) {
        Ok(s) => s,
        Err(e) => {
            return openai_error(
                StatusCode::BAD_GATEWAY,
                "backend_unavailable",
                &format!("event bus: {e}"),
                json!({"backend": "store"}),
            )
        }
    };
    let (tx, rx) = mpsc::channel::<Result<Bytes, Infallible>>(64);
    let writer = ChunkWriter::new(&req.model, flavor);
    let engine = state.engine.clone();
    let drain_idle = state.drain_idle;
    tokio::task::spawn_blocking(move || stream_worker(engine, bus, sub, req, writer, tx, drain_idle));
    Response::builder()
        .status(StatusCode::OK)
        .header(header::CONTENT_TYPE, "text/event-stream")
        .header(header::CACHE_CONTROL, "no-cache")
        .body(Body::from_stream(ReceiverStream::new(rx)))
        .expect("static response parts")
}

/// Writes SSE frames for one response and mirrors content to the
/// `{chat_id}:stream` channel.
struct StreamOut {
    tx: mpsc::Sender<Result<Bytes, Infallible>>,
    writer: ChunkWriter,
    bus: std::sync::Arc<dyn EventBus>,
    mirror: String,
    first: bool,
    at_line_start: bool,
    last_tag: Option<(String, String)>,
}

impl StreamOut {
    fn send(&self, frame: String) {
        // a closed receiver means the client left; the pipeline still finishes
        let _ = self.tx.blocking_send(Ok(Bytes::from(frame)));
    }

    fn emit(&mut self, content: &str) {
        self.send(ChunkWriter::frame(&self.writer.chunk(Some(content), self.first, None)));
        self.first = false;
        self.at_line_start = content.ends_with('\n');
        if let Err(e) = self.bus.publish_raw(&self.mirror, content) {
            tracing::warn!(channel = %self.mirror, "stream mirror failed: {e}");
        }
    }

    /// Payloads pass through verbatim; a newline separates consecutive
    /// events of different tags when the earlier one did not end a line.
    fn forward(&mut self, wire: &str) {
        let Ok(event) = parse_frame(wire) else { return };
        let tag = (event.component, event.event);
        let sep = self.last_tag.as_ref().is_some_and(|t| *t != tag) && !self.at_line_start;
        self.last_tag = Some(tag);
        if sep {
            self.emit(&format!("\n{}", event.content));
        } else if !event.content.is_empty() {
            self.emit(&event.content);
        }
    }

    fn close_think(&mut self) {
        self.emit(if self.at_line_start { "</think>\n\n" } else { "\n</think>\n\n" });
    }

    fn fail(&self, message: &str, detail: JsonValue) {
        let mut chunk = self.writer.chunk(Some(&format!("Error: {message}")), false, Some("stop"));
        chunk["error"] = detail;
        self.send(ChunkWriter::frame(&chunk));
        self.send(DONE_FRAME.to_string());
    }
}

fn stream_worker(
    engine: Engine,
    bus: std::sync::Arc<dyn EventBus>,
    sub: Subscription,
    req: CompatRequest,
    writer: ChunkWriter,
    tx: mpsc::Sender<Result<Bytes, Infallible>>,
    drain_idle: Duration,
) {
    let mut out = StreamOut {
        tx,
        writer,
        bus,
        mirror: stream_channel(&req.chat_id),
        first: true,
        at_line_start: true,
        last_tag: None,
    };
    out.emit("<think>\n");
    let (chat_id, question) = (req.chat_id.clone(), req.question.clone());
    let pipeline = std::thread::spawn(move || engine.run_with(&chat_id, &question, &RunOptions::default()));
    while !pipeline.is_finished() {
        if let Some(wire) = sub.recv_timeout(POLL) {
            out.forward(&wire);
        }
    }
    for wire in sub.drain(drain_idle) {
        out.forward(&wire);
    }
    drop(sub);
    out.close_think();
    match pipeline.join() {
        Ok(Ok(outcome)) => {
            out.emit(&outcome.answer_markdown());
            out.send(ChunkWriter::frame(&out.writer.chunk(None, false, Some("stop"))));
            out.send(DONE_FRAME.to_string());
        }
        Ok(Err(e)) => {
            let (_, detail) = error_status(&e);
            let mut detail = detail;
            detail["message"] = json!(e.to_string());
            out.fail(&e.to_string(), detail);
        }
        Err(_) => out.fail("the pipeline panicked", json!({"error": "internal", "message": "pipeline panicked"})),
    }
}
