//! Chat-completion backends: an OpenAI-compatible HTTP client and a
//! deterministic scripted backend for tests and benchmark runs.

mod http;
mod scripted;

use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use self::http::HttpLlm;
pub use self::scripted::{Playbook, PlaybookScript, ScriptEntry, ScriptedLlm};

pub const DEFAULT_TEMPERATURE: f64 = 0.1;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: Role::Assistant, content: content.into() }
    }
}

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmParams {
    pub model: String,
    pub temperature: f64,
    pub base_url: String,
    pub api_key: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_timeout_secs() -> u64 {
    DEFAULT_TIMEOUT.as_secs()
}

impl fmt::Debug for LlmParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LlmParams")
            .field("model", &self.model)
            .field("temperature", &self.temperature)
            .field("base_url", &self.base_url)
            .field("api_key", &"<redacted>")
            .field("timeout_secs", &self.timeout_secs)
            .finish()
    }
}

impl LlmParams {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>, api_key: impl Into<String>) -> Self {
        Self {
            model: model.into(),
            temperature: DEFAULT_TEMPERATURE,
            base_url: base_url.into(),
            api_key: api_key.into(),
            timeout_secs: default_timeout_secs(),
        }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(LlmError::InvalidParams(format!("temperature must be >= 0, got {}", self.temperature)));
        }
        if self.model.trim().is_empty() {
            return Err(LlmError::InvalidParams("model must not be empty".into()));
        }
        if self.timeout_secs == 0 {
            return Err(LlmError::InvalidParams("timeout must be at least one second".into()));
        }
        match url::Url::parse(&self.base_url) {
            Ok(u) if matches!(u.scheme(), "http" | "https") && u.host().is_some() => Ok(()),
            Ok(u) => Err(LlmError::InvalidParams(format!("unsupported base_url scheme: {}", u.scheme()))),
            Err(e) => Err(LlmError::InvalidParams(format!("malformed base_url {:?}: {e}", self.base_url))),
        }
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs(self.timeout_secs)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LlmError {
    #[error("invalid LLM parameters: {0}")]
    InvalidParams(String),
    #[error("chat request needs at least one message")]
    EmptyMessages,
    #[error("LLM endpoint unreachable: {0}")]
    Unreachable(String),
    #[error("LLM endpoint returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("LLM request timed out")]
    Timeout,
    #[error("LLM stream interrupted after {} bytes: {source_msg}", partial.len())]
    Interrupted { partial: String, source_msg: String },
    #[error("unexpected LLM response: {0}")]
    Protocol(String),
    #[error("scripted playbook exhausted after {calls} calls")]
    PlaybookExhausted { calls: usize },
}

/// A chat-completion backend. Implementations are shared between requests.
pub trait ChatBackend: Send + Sync {
    /// Returns the assistant message content verbatim.
    fn chat(&self, messages: &[ChatMessage]) -> Result<String, LlmError>;

    /// Calls `on_chunk` once per content delta, in arrival order, and
    /// returns their concatenation.
    fn chat_stream(&self, messages: &[ChatMessage], on_chunk: &mut dyn FnMut(&str)) -> Result<String, LlmError>;
}

impl<T: ChatBackend + ?Sized> ChatBackend for std::sync::Arc<T> {
    fn chat(&self, messages: &[ChatMessage]) -> Result<String, LlmError> {
        (**self).chat(messages)
    }

    fn chat_stream(&self, messages: &[ChatMessage], on_chunk: &mut dyn FnMut(&str)) -> Result<String, LlmError> {
        (**self).chat_stream(messages, on_chunk)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn params_validation() {
        let ok = LlmParams::new("http://localhost:11434/v1", "m", "k");
        assert!(ok.validate().is_ok());
        let mut bad = ok.clone();
        bad.temperature = -0.5;
        assert!(bad.validate().is_err());
        bad = ok.clone();
        bad.base_url = "localhost:11434".into();
        assert!(bad.validate().is_err());
        bad = ok.clone();
        bad.base_url = "not a url".into();
        assert!(bad.validate().is_err());
        assert!(!format!("{ok:?}").contains("\"k\""));
    }

    #[test]
    fn message_roles_serialize_lowercase() {
        let m = ChatMessage::assistant("hi");
        assert_eq!(serde_json::to_string(&m).unwrap(), r#"{"role":"assistant","content":"hi"}"#);
    }
}
