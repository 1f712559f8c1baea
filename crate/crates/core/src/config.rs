//! Environment-driven configuration.

use crate::db::{ConnectionParams, DEFAULT_ROW_LIMIT};
use crate::error::EngineError;
use crate::evaluator::{LoopConfig, DEFAULT_FEEDBACK_EXAMPLES, DEFAULT_RETRY_COUNT};
use crate::llm::{LlmParams, DEFAULT_TEMPERATURE};
use crate::session::KvParams;

pub const DEFAULT_PORT: u16 = 5181;

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub llm: LlmParams,
    pub db: ConnectionParams,
    pub kv: KvParams,
    pub loop_defaults: LoopConfig,
    /// Bearer keys for the OpenAI-compatible routes; empty disables auth.
    pub api_keys: Vec<String>,
}

/// Splits a comma-separated key list, dropping blanks.
pub fn parse_api_keys(raw: &str) -> Vec<String> {
    raw.split(',').map(str::trim).filter(|k| !k.is_empty()).map(String::from).collect()
}

impl Config {
    pub fn from_env() -> Result<Self, EngineError> {
        Self::from_lookup(|k| std::env::var(k).ok())
    }

    /// Reads the variables through `get`, so tests need not touch the
    /// process environment.
    pub fn from_lookup(get: impl Fn(&str) -> Option<String>) -> Result<Self, EngineError> {
        let text = |k: &str, default: &str| get(k).unwrap_or_else(|| default.to_string());
        fn num<T: std::str::FromStr>(k: &str, v: Option<String>, default: T) -> Result<T, EngineError> {
            match v {
                None => Ok(default),
                Some(s) => s
                    .trim()
                    .parse()
                    .map_err(|_| EngineError::InvalidRequest(format!("{k} must be a number, got {s:?}"))),
            }
        }
        Ok(Self {
            llm: LlmParams {
                model: text("LLM_MODEL", "qwen2.5-coder:7b"),
                temperature: DEFAULT_TEMPERATURE,
                base_url: text("LLM_BASE_URL", "http://localhost:11434/v1"),
                api_key: text("LLM_API_KEY", ""),
                timeout_secs: crate::llm::DEFAULT_TIMEOUT.as_secs(),
            },
            db: ConnectionParams {
                host: text("PG_HOST", "localhost"),
                port: num("PG_PORT", get("PG_PORT"), 5432)?,
                dbname: text("PG_DBNAME", "postgres"),
                user: text("PG_USER", "postgres"),
                password: text("PG_PASSWORD", ""),
            },
            kv: KvParams {
                host: text("KV_HOST", "localhost"),
                port: num("KV_PORT", get("KV_PORT"), 6379)?,
                password: text("KV_PASSWORD", ""),
                db: num("KV_DB", get("KV_DB"), 0)?,
            },
            loop_defaults: LoopConfig {
                retry_count: num("RETRY_COUNT", get("RETRY_COUNT"), DEFAULT_RETRY_COUNT)?,
                feedback_examples: num("FEEDBACK_EXAMPLES", get("FEEDBACK_EXAMPLES"), DEFAULT_FEEDBACK_EXAMPLES)?,
                row_limit: num("ROW_LIMIT", get("ROW_LIMIT"), DEFAULT_ROW_LIMIT)?,
            },
            api_keys: parse_api_keys(&text("OPENAI_API_KEY", "")),
        })
    }
}
