//! Stage 2: the self-healing loop.
//!
//! Each iteration executes the current query. An error-free result with at
//! least one row is returned immediately. Anything else is compared against
//! the best result so far and, while repair budget remains, sent to the LLM
//! together with the diagnostics. The LLM's `isValid` verdict is never read.
//!
//! `retry_count` is the number of repair attempts, so a loop executes at
//! most `retry_count + 1` queries and `retry_count = 0` runs the initial
//! query once without any LLM call.

use serde::{Deserialize, Serialize};

use crate::db::{format_error, ErrorDiagnostics, Execution, LazyDatabase, QueryResult, DEFAULT_ROW_LIMIT};
use crate::error::EngineError;
use crate::events::{self, ProgressEvent};
use crate::generator::{build_schema_context, SchemaContext, Services};
use crate::llm::{ChatMessage, LlmError};
use crate::parser::{parse_evaluation, ParseStrategy};
use crate::prompts::{inject_guidelines, system_prompt, Stage};

pub const DEFAULT_RETRY_COUNT: usize = 5;
pub const DEFAULT_FEEDBACK_EXAMPLES: usize = 3;
pub const INITIAL_OBSERVATION: &str = "initial generation";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoopConfig {
    pub retry_count: usize,
    pub feedback_examples: usize,
    pub row_limit: usize,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            retry_count: DEFAULT_RETRY_COUNT,
            feedback_examples: DEFAULT_FEEDBACK_EXAMPLES,
            row_limit: DEFAULT_ROW_LIMIT,
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        if self.row_limit == 0 {
            return Err(EngineError::InvalidRequest("row limit must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum AttemptOutcome {
    Rows { count: usize, truncated: bool },
    Error { diagnostics: ErrorDiagnostics },
}

/// The LLM repair step that followed an execution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepairRecord {
    pub observation: String,
    pub modified_prompt: String,
    pub fixed_query: Option<String>,
    pub strategy: Option<ParseStrategy>,
    /// Set when the LLM call or the parse failed; the iteration is spent and
    /// the previous query runs again.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub iteration: usize,
    pub executed_query: String,
    /// Prompt and observation in effect when the query was executed.
    pub prompt: String,
    pub observation: String,
    pub outcome: AttemptOutcome,
    pub repair: Option<RepairRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationOutcome {
    pub query: String,
    pub result: QueryResult,
    pub iterations_used: usize,
    pub early_accepted: bool,
    pub repair_calls: usize,
    pub context_source: crate::generator::ContextSource,
    /// Diagnostics of the last execution when no attempt ran error-free.
    pub final_error: Option<ErrorDiagnostics>,
    pub attempts: Vec<AttemptRecord>,
    /// Every evaluation request and reply, in order.
    #[serde(skip)]
    pub transcript: Vec<ChatMessage>,
}

impl EvaluationOutcome {
    pub fn executions(&self) -> usize {
        self.attempts.len()
    }
}

/// Payload context when given (no store access), else cache, else a fresh
/// build.
pub fn resolve_context(
    payload: Option<SchemaContext>,
    chat_id: &str,
    key: &str,
    db: &mut LazyDatabase<'_>,
    svc: &Services<'_>,
    sample_rows: usize,
) -> Result<SchemaContext, EngineError> {
    match payload {
        Some(ctx) => Ok(ctx.as_payload()),
        None => build_schema_context(chat_id, key, db, svc, sample_rows),
    }
}

fn rank(e: &Execution) -> u8 {
    match e {
        Execution::Rows(r) if !r.rows.is_empty() => 2,
        Execution::Rows(_) => 1,
        Execution::Failed(_) => 0,
    }
}

/// Result ordering: rows ≻ empty ≻ error. A candidate replaces the best only
/// when strictly better; an errored candidate never does.
pub fn better_than(candidate: &Execution, best: Option<&QueryResult>) -> bool {
    if candidate.error().is_some() {
        return false;
    }
    match best {
        None => true,
        Some(b) => rank(candidate) > rank(&Execution::Rows(b.clone())),
    }
}

pub struct EvalPromptInput<'a> {
    pub schema_description: &'a str,
    pub original_prompt: &'a str,
    pub prompt: &'a str,
    pub query: &'a str,
    pub result: Option<&'a QueryResult>,
    pub feedback_examples: usize,
    pub error: Option<&'a ErrorDiagnostics>,
    pub guidelines: &'a str,
}

pub fn build_eval_messages(input: &EvalPromptInput<'_>) -> Vec<ChatMessage> {
    let mut user = format!(
        "Original question: {}\nCurrent question: {}\n\nQuery under review:\n```sql\n{}\n```\n\n",
        input.original_prompt, input.prompt, input.query
    );
    match (input.error, input.result) {
        (Some(e), _) => {
            user.push_str("## Execution error\n\n");
            user.push_str(&format_error(e));
            user.push('\n');
        }
        (None, Some(r)) => {
            user.push_str(&format!(
                "## Execution result\n\nThe query ran without error and returned {} row(s).\n",
                r.rows.len()
            ));
            let head = input.feedback_examples.min(r.rows.len());
            if head > 0 {
                user.push_str(&format!("\nFirst {head} row(s):\n\n"));
                user.push_str(&crate::db::markdown_table(&r.columns, &r.rows[..head]));
            }
        }
        (None, None) => {}
    }
    user.push_str("\nReply with the JSON object described in the instructions.");
    vec![ChatMessage::system(system_prompt(input.guidelines, input.schema_description)), ChatMessage::user(user)]
}

fn execution_content(query: &str, observation: &str, exec: &Execution) -> String {
    let status = match exec {
        Execution::Rows(r) if r.truncated => format!("Result: {} row(s) (truncated)", r.rows.len()),
        Execution::Rows(r) => format!("Result: {} row(s)", r.rows.len()),
        Execution::Failed(e) => format!("Error: {}", e.summary()),
    };
    format!("Query:\n```sql\n{query}\n```\nObservation: {observation}\n{status}\n")
}

fn repair_content(rec: &RepairRecord) -> String {
    match (&rec.error, &rec.fixed_query) {
        (Some(err), _) => format!("Repair attempt failed: {err}\n"),
        (None, Some(q)) => format!(
            "Observation: {}\nFixed query:\n```sql\n{q}\n```\nModified prompt: {}\n",
            rec.observation, rec.modified_prompt
        ),
        (None, None) => String::new(),
    }
}

fn final_content(e: &EvaluationOutcome) -> String {
    let status = match (&e.final_error, e.result.rows.len()) {
        (Some(err), _) => format!("No error-free execution: {}", err.summary()),
        (None, n) => format!("Result: {n} row(s)"),
    };
    let how = if e.early_accepted { "accepted" } else { "best result kept" };
    format!("Final query after {} execution(s), {how}:\n```sql\n{}\n```\n{status}\n", e.attempts.len(), e.query)
}

fn finish(chat_id: &str, svc: &Services<'_>, outcome: EvaluationOutcome) -> EvaluationOutcome {
    events::publish(
        svc.bus,
        chat_id,
        &ProgressEvent::new(events::EVALUATOR, events::FINAL_RESULT, final_content(&outcome)),
    );
    outcome
}

/// Runs the loop for `query`. Only a lost or failed database connection
/// aborts it; LLM and parse failures spend the iteration.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    chat_id: &str,
    query: &str,
    prompt: &str,
    cfg: &LoopConfig,
    context: &SchemaContext,
    db: &mut LazyDatabase<'_>,
    svc: &Services<'_>,
) -> Result<EvaluationOutcome, EngineError> {
    cfg.validate()?;
    if query.trim().is_empty() {
        return Err(EngineError::InvalidRequest("query must not be empty".into()));
    }
    let guidelines = inject_guidelines(Stage::Evaluation, svc.guidelines);
    let mut q = query.trim().to_string();
    let mut p = prompt.to_string();
    let mut obs = INITIAL_OBSERVATION.to_string();
    let mut best: Option<(String, QueryResult)> = None;
    let mut last_error: Option<ErrorDiagnostics> = None;
    let mut attempts = Vec::new();
    let mut transcript = Vec::new();
    let mut repair_calls = 0;

    for i in 1..=cfg.retry_count + 1 {
        let exec = db.get()?.execute_readonly(&q, cfg.row_limit)?;
        events::publish(
            svc.bus,
            chat_id,
            &ProgressEvent::new(events::EVALUATOR, events::query_execution_tag(i), execution_content(&q, &obs, &exec)),
        );
        let outcome = match &exec {
            Execution::Rows(r) => AttemptOutcome::Rows { count: r.rows.len(), truncated: r.truncated },
            Execution::Failed(e) => AttemptOutcome::Error { diagnostics: e.clone() },
        };
        let mut record = AttemptRecord {
            iteration: i,
            executed_query: q.clone(),
            prompt: p.clone(),
            observation: obs.clone(),
            outcome,
            repair: None,
        };
        if exec.has_rows() {
            attempts.push(record);
            let Execution::Rows(result) = exec else { unreachable!() };
            return Ok(finish(
                chat_id,
                svc,
                EvaluationOutcome {
                    query: q,
                    result,
                    iterations_used: i,
                    early_accepted: true,
                    repair_calls,
                    context_source: context.source,
                    final_error: None,
                    attempts,
                    transcript,
                },
            ));
        }
        if better_than(&exec, best.as_ref().map(|(_, r)| r)) {
            best = exec.rows().map(|r| (q.clone(), r.clone()));
        }
        last_error = exec.error().cloned();
        if i > cfg.retry_count {
            attempts.push(record);
            break;
        }

        let messages = build_eval_messages(&EvalPromptInput {
            schema_description: &context.description,
            original_prompt: prompt,
            prompt: &p,
            query: &q,
            result: exec.rows(),
            feedback_examples: cfg.feedback_examples,
            error: exec.error(),
            guidelines,
        });
        repair_calls += 1;
        let reply = svc.llm.chat(&messages);
        transcript.extend(messages);
        let repair = match reply {
            Ok(raw) => {
                transcript.push(ChatMessage::assistant(raw.clone()));
                match parse_evaluation(&raw) {
                    Ok((resp, strategy)) => RepairRecord {
                        observation: resp.observation,
                        modified_prompt: resp.modified_user_prompt,
                        fixed_query: Some(resp.fixed_query),
                        strategy: Some(strategy),
                        error: None,
                    },
                    Err(e) => failed_repair(e.to_string()),
                }
            }
            Err(e @ (LlmError::InvalidParams(_) | LlmError::EmptyMessages)) => return Err(e.into()),
            Err(e) => failed_repair(e.to_string()),
        };
        events::publish(
            svc.bus,
            chat_id,
            &ProgressEvent::new(events::EVALUATOR, events::query_fix_tag(i), repair_content(&repair)),
        );
        if let Some(fixed) = &repair.fixed_query {
            q = fixed.clone();
            if !repair.modified_prompt.trim().is_empty() {
                p = repair.modified_prompt.clone();
            }
            obs = repair.observation.clone();
        }
        record.repair = Some(repair);
        attempts.push(record);
    }

    let iterations_used = attempts.len();
    let (query, result, final_error) = match best {
        Some((bq, br)) => (bq, br, None),
        None => (q, QueryResult::empty(), last_error),
    };
    Ok(finish(
        chat_id,
        svc,
        EvaluationOutcome {
            query,
            result,
            iterations_used,
            early_accepted: false,
            repair_calls,
            context_source: context.source,
            final_error,
            attempts,
            transcript,
        },
    ))
}

fn failed_repair(error: String) -> RepairRecord {
    RepairRecord {
        observation: String::new(),
        modified_prompt: String::new(),
        fixed_query: None,
        strategy: None,
        error: Some(error),
    }
}
