//! Embeddable entry point: construct from LLM, database and store
//! parameters, then call [`Engine::run`], [`Engine::generate`] or
//! [`Engine::evaluate`]. The HTTP layer is a thin adapter over this type.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::db::{markdown_table, ConnectionParams, Connector, LazyDatabase, PgConnector};
use crate::error::EngineError;
use crate::evaluator::{self, EvaluationOutcome, LoopConfig};
use crate::events::{EventBus, RedisBus};
use crate::generator::{self, GenerationOutcome, SchemaContext, Services, DEFAULT_SAMPLE_ROWS};
use crate::llm::{ChatBackend, HttpLlm, LlmParams};
use crate::prompts::Guidelines;
use crate::session::{KvParams, RedisHashStore, SessionStore, DEFAULT_SCHEMA_KEY};

#[derive(Debug, Clone)]
pub struct EngineSettings {
    pub guidelines: Guidelines,
    pub sample_rows: usize,
    pub loop_defaults: LoopConfig,
    pub schema_key: String,
}

impl Default for EngineSettings {
    fn default() -> Self {
        Self {
            guidelines: Guidelines::default(),
            sample_rows: DEFAULT_SAMPLE_ROWS,
            loop_defaults: LoopConfig::default(),
            schema_key: DEFAULT_SCHEMA_KEY.to_string(),
        }
    }
}

/// Per-call overrides of the engine defaults.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunOptions {
    pub retry_count: Option<usize>,
    pub feedback_examples: Option<usize>,
    pub row_limit: Option<usize>,
    pub schema_key: Option<String>,
}

impl RunOptions {
    pub fn with_retry_count(n: usize) -> Self {
        Self { retry_count: Some(n), ..Self::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOutcome {
    pub generation: GenerationOutcome,
    pub evaluation: EvaluationOutcome,
}

impl PipelineOutcome {
    /// Final SQL in a fenced block followed by the result table.
    pub fn answer_markdown(&self) -> String {
        answer_markdown(&self.evaluation)
    }
}

pub fn answer_markdown(e: &EvaluationOutcome) -> String {
    let mut out = format!("```sql\n{}\n```\n\n", e.query);
    if let Some(err) = &e.final_error {
        out.push_str(&format!("The query could not be repaired: {}\n", err.summary()));
    } else if e.result.rows.is_empty() {
        out.push_str("The query returned no rows.\n");
    } else {
        out.push_str(&markdown_table(&e.result.columns, &e.result.rows));
        if e.result.truncated {
            out.push_str(&format!("\nShowing the first {} rows.\n", e.result.rows.len()));
        }
    }
    out
}

/// Backend handles an engine runs against.
#[derive(Clone)]
pub struct Backends {
    pub llm: Arc<dyn ChatBackend>,
    pub connector: Arc<dyn Connector>,
    pub store: SessionStore,
    pub bus: Arc<dyn EventBus>,
}

/// Shareable engine handle. Requests for the same chat are serialized;
/// different chats run concurrently.
#[derive(Clone)]
pub struct Engine {
    backends: Backends,
    settings: Arc<EngineSettings>,
    chat_locks: Arc<Mutex<HashMap<String, Arc<Mutex<()>>>>>,
}

impl Engine {
    /// Validates all three parameter groups without contacting any backend;
    /// connections open on first use.
    pub fn new(llm: LlmParams, db: ConnectionParams, kv: KvParams) -> Result<Self, EngineError> {
        Self::with_settings(llm, db, kv, EngineSettings::default())
    }

    pub fn with_settings(
        llm: LlmParams,
        db: ConnectionParams,
        kv: KvParams,
        settings: EngineSettings,
    ) -> Result<Self, EngineError> {
        let backends = Backends {
            llm: Arc::new(HttpLlm::new(llm)?),
            connector: Arc::new(PgConnector::new(db)?),
            store: SessionStore::new(Arc::new(RedisHashStore::new(kv.clone())?)),
            bus: Arc::new(RedisBus::new(kv).map_err(|e| EngineError::InvalidRequest(e.to_string()))?),
        };
        Ok(Self::with_backends(backends, settings))
    }

    pub fn with_backends(backends: Backends, settings: EngineSettings) -> Self {
        Self { backends, settings: Arc::new(settings), chat_locks: Arc::default() }
    }

    /// A handle sharing this engine's per-chat locks with some backends
    /// swapped out.
    pub fn with_overrides(
        &self,
        llm: Option<LlmParams>,
        db: Option<ConnectionParams>,
        kv: Option<KvParams>,
    ) -> Result<Self, EngineError> {
        let mut backends = self.backends.clone();
        if let Some(p) = llm {
            backends.llm = Arc::new(HttpLlm::new(p)?);
        }
        if let Some(p) = db {
            backends.connector = Arc::new(PgConnector::new(p)?);
        }
        if let Some(p) = kv {
            backends.store = SessionStore::new(Arc::new(RedisHashStore::new(p.clone())?));
            backends.bus = Arc::new(RedisBus::new(p).map_err(|e| EngineError::InvalidRequest(e.to_string()))?);
        }
        Ok(Self { backends, settings: self.settings.clone(), chat_locks: self.chat_locks.clone() })
    }

    pub fn backends(&self) -> &Backends {
        &self.backends
    }

    pub fn bus(&self) -> Arc<dyn EventBus> {
        self.backends.bus.clone()
    }

    pub fn settings(&self) -> &EngineSettings {
        &self.settings
    }

    fn services(&self) -> Services<'_> {
        Services {
            llm: self.backends.llm.as_ref(),
            store: &self.backends.store,
            bus: self.backends.bus.as_ref(),
            guidelines: &self.settings.guidelines,
        }
    }

    fn loop_config(&self, opts: &RunOptions) -> Result<LoopConfig, EngineError> {
        let d = self.settings.loop_defaults;
        let cfg = LoopConfig {
            retry_count: opts.retry_count.unwrap_or(d.retry_count),
            feedback_examples: opts.feedback_examples.unwrap_or(d.feedback_examples),
            row_limit: opts.row_limit.unwrap_or(d.row_limit),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn schema_key<'a>(&'a self, opts: &'a RunOptions) -> Result<&'a str, EngineError> {
        let key = opts.schema_key.as_deref().unwrap_or(&self.settings.schema_key);
        if key.is_empty() {
            return Err(EngineError::InvalidRequest("schema description key must not be empty".into()));
        }
        Ok(key)
    }

    fn with_chat_lock<T>(&self, chat_id: &str, f: impl FnOnce() -> T) -> Result<T, EngineError> {
        if chat_id.trim().is_empty() {
            return Err(EngineError::InvalidRequest("chat id must not be empty".into()));
        }
        let lock = self.chat_locks.lock().unwrap().entry(chat_id.to_string()).or_default().clone();
        let out = {
            let _guard = lock.lock().unwrap_or_else(|p| p.into_inner());
            f()
        };
        let mut locks = self.chat_locks.lock().unwrap();
        if Arc::strong_count(&lock) == 2 {
            locks.remove(chat_id);
        }
        Ok(out)
    }

    pub fn run(&self, chat_id: &str, base_prompt: &str) -> Result<PipelineOutcome, EngineError> {
        self.run_with(chat_id, base_prompt, &RunOptions::default())
    }

    /// Stage 1 then Stage 2; Stage 2 receives Stage 1's context as payload
    /// and its transcript is stored under the next validator index.
    pub fn run_with(&self, chat_id: &str, prompt: &str, opts: &RunOptions) -> Result<PipelineOutcome, EngineError> {
        let cfg = self.loop_config(opts)?;
        let key = self.schema_key(opts)?;
        self.with_chat_lock(chat_id, || {
            let svc = self.services();
            let mut db = LazyDatabase::new(self.backends.connector.as_ref());
            let ctx = generator::build_schema_context(chat_id, key, &mut db, &svc, self.settings.sample_rows)?;
            let generation = generator::generate(chat_id, prompt, &ctx, &svc)?;
            let evaluation =
                evaluator::evaluate(chat_id, &generation.query, prompt, &cfg, &ctx.as_payload(), &mut db, &svc)?;
            self.save_transcript(chat_id, prompt, &evaluation)?;
            Ok(PipelineOutcome { generation, evaluation })
        })?
    }

    pub fn generate(&self, chat_id: &str, prompt: &str, opts: &RunOptions) -> Result<GenerationOutcome, EngineError> {
        let key = self.schema_key(opts)?;
        self.with_chat_lock(chat_id, || {
            let svc = self.services();
            let mut db = LazyDatabase::new(self.backends.connector.as_ref());
            let ctx = generator::build_schema_context(chat_id, key, &mut db, &svc, self.settings.sample_rows)?;
            generator::generate(chat_id, prompt, &ctx, &svc)
        })?
    }

    /// Repairs an externally supplied query. Context comes from `payload`
    /// when given, else the session cache, else a fresh build.
    pub fn evaluate(
        &self,
        chat_id: &str,
        query: &str,
        prompt: &str,
        payload: Option<SchemaContext>,
        opts: &RunOptions,
    ) -> Result<EvaluationOutcome, EngineError> {
        let cfg = self.loop_config(opts)?;
        let key = self.schema_key(opts)?;
        self.with_chat_lock(chat_id, || {
            let svc = self.services();
            let mut db = LazyDatabase::new(self.backends.connector.as_ref());
            let ctx = evaluator::resolve_context(payload, chat_id, key, &mut db, &svc, self.settings.sample_rows)?;
            let outcome = evaluator::evaluate(chat_id, query, prompt, &cfg, &ctx, &mut db, &svc)?;
            self.save_transcript(chat_id, prompt, &outcome)?;
            Ok(outcome)
        })?
    }

    fn save_transcript(&self, chat_id: &str, prompt: &str, e: &EvaluationOutcome) -> Result<(), EngineError> {
        let doc = json!({
            "prompt": prompt,
            "query": e.query,
            "early_accepted": e.early_accepted,
            "attempts": e.attempts,
            "messages": e.transcript,
        });
        self.backends.store.record_validator_history(chat_id, &doc.to_string())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_does_not_connect() {
        let llm = LlmParams::new("http://127.0.0.1:9/v1", "m", "k");
        let db = ConnectionParams {
            host: "127.0.0.1".into(),
            port: 9,
            dbname: "d".into(),
            user: "u".into(),
            password: "p".into(),
        };
        assert!(Engine::new(llm.clone(), db.clone(), KvParams::new("127.0.0.1", 9)).is_ok());
        let mut bad = db;
        bad.port = 0;
        let err = Engine::new(llm, bad, KvParams::new("127.0.0.1", 9)).err().unwrap();
        assert!(err.is_invalid_request());
    }
}
