//! Stage 1: resolve or build the schema context, then draft a query.

use serde::{Deserialize, Serialize};

use crate::db::{LazyDatabase, RawSchemaDump};
use crate::error::EngineError;
use crate::events::{self, EventBus, ProgressEvent};
use crate::llm::{ChatBackend, ChatMessage, LlmError};
use crate::parser::{parse_generation, ParseStrategy};
use crate::prompts::{inject_guidelines, system_prompt, Guidelines, Stage};
use crate::session::SessionStore;

pub const DEFAULT_SAMPLE_ROWS: usize = 3;

/// Shared collaborators for one request.
#[derive(Clone, Copy)]
pub struct Services<'a> {
    pub llm: &'a dyn ChatBackend,
    pub store: &'a SessionStore,
    pub bus: &'a dyn EventBus,
    pub guidelines: &'a Guidelines,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ContextSource {
    /// Supplied by the caller, typically Stage 1 handing over to Stage 2.
    Payload,
    Cache,
    Scratch,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaContext {
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_dump: Option<RawSchemaDump>,
    pub source: ContextSource,
}

impl SchemaContext {
    pub fn payload(description: impl Into<String>) -> Self {
        Self { description: description.into(), raw_dump: None, source: ContextSource::Payload }
    }

    /// The same context marked as handed over by the caller.
    pub fn as_payload(&self) -> Self {
        Self { source: ContextSource::Payload, ..self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationOutcome {
    pub description: String,
    pub query: String,
    pub context: SchemaContext,
    pub strategy: ParseStrategy,
}

/// Returns the cached context for `(chat_id, key)`, or introspects the
/// database, streams an LLM-written description to the bus and caches it.
/// A cache hit touches neither the database nor the LLM.
pub fn build_schema_context(
    chat_id: &str,
    key: &str,
    db: &mut LazyDatabase<'_>,
    svc: &Services<'_>,
    sample_rows: usize,
) -> Result<SchemaContext, EngineError> {
    if let Some(cached) = svc.store.load_context(chat_id, key)? {
        return Ok(SchemaContext {
            description: cached.description,
            raw_dump: cached.raw_dump,
            source: ContextSource::Cache,
        });
    }
    let dump = db.get()?.get_schema_dump(sample_rows)?;
    let messages = vec![
        ChatMessage::system(svc.guidelines.schema_description.trim()),
        ChatMessage::user(format!("Database has {} table(s).\n\n{}", dump.table_count, dump.markdown)),
    ];
    let description = svc.llm.chat_stream(&messages, &mut |chunk| {
        events::publish(
            svc.bus,
            chat_id,
            &ProgressEvent::new(events::GENERATOR, events::SCHEMA_DESCRIPTION_CHAT, chunk),
        );
    })?;
    if description.trim().is_empty() {
        return Err(LlmError::Protocol("LLM returned an empty schema description".into()).into());
    }
    let history = svc.store.load_history(chat_id)?;
    svc.store.save_context(chat_id, key, &description, Some(&dump), &history)?;
    Ok(SchemaContext { description, raw_dump: Some(dump), source: ContextSource::Scratch })
}

pub fn generation_messages(
    guidelines: &Guidelines,
    context: &SchemaContext,
    history: &[ChatMessage],
    prompt: &str,
) -> Vec<ChatMessage> {
    let mut messages = Vec::with_capacity(history.len() + 2);
    messages.push(ChatMessage::system(system_prompt(
        inject_guidelines(Stage::Generation, guidelines),
        &context.description,
    )));
    messages.extend_from_slice(history);
    messages.push(ChatMessage::user(prompt));
    messages
}

/// One LLM call answering `prompt`; the exchange is appended to the chat
/// history only when the reply parses.
pub fn generate(
    chat_id: &str,
    prompt: &str,
    context: &SchemaContext,
    svc: &Services<'_>,
) -> Result<GenerationOutcome, EngineError> {
    if prompt.trim().is_empty() {
        return Err(EngineError::InvalidRequest("prompt must not be empty".into()));
    }
    let history = svc.store.load_history(chat_id)?;
    let messages = generation_messages(svc.guidelines, context, &history, prompt);
    let raw = svc.llm.chat(&messages)?;
    let (parsed, strategy) = parse_generation(&raw)?;
    svc.store.append_history(chat_id, &[ChatMessage::user(prompt), ChatMessage::assistant(raw)])?;
    let content = if parsed.description.is_empty() {
        format!("```sql\n{}\n```", parsed.query)
    } else {
        format!("{}\n\n```sql\n{}\n```", parsed.description, parsed.query)
    };
    events::publish(svc.bus, chat_id, &ProgressEvent::new(events::GENERATOR, events::QUERY_GENERATION, content));
    Ok(GenerationOutcome { description: parsed.description, query: parsed.query, context: context.clone(), strategy })
}
