//! Natural-language to read-only PostgreSQL query engine.
//!
//! Stage 1 ([`generator`]) resolves a schema context and drafts a query.
//! Stage 2 ([`evaluator`]) executes it and repairs it with LLM feedback until
//! it returns rows or the retry budget runs out.

pub mod api;
pub mod config;
pub mod db;
pub mod engine;
pub mod error;
pub mod evaluator;
pub mod events;
pub mod generator;
pub mod harness;
pub mod llm;
pub mod migrate;
pub mod parser;
pub mod prompts;
pub mod session;
pub mod testkit;

pub use crate::config::Config;
pub use crate::db::{ConnectionParams, QueryResult, Value};
pub use crate::engine::{Engine, PipelineOutcome, RunOptions};
pub use crate::error::EngineError;
pub use crate::evaluator::EvaluationOutcome;
pub use crate::generator::{GenerationOutcome, SchemaContext};
pub use crate::llm::LlmParams;
pub use crate::session::KvParams;
