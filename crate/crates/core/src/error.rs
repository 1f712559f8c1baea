use thiserror::Error;

use crate::db::DbError;
use crate::llm::LlmError;
use crate::parser::ParseFailed;
use crate::session::StoreError;

/// Failures surfaced by the pipeline entry points.
#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error(transparent)]
    Db(#[from] DbError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Parse(#[from] ParseFailed),
}

impl EngineError {
    /// Which backend failed, if the failure was a backend's.
    pub fn backend(&self) -> Option<&'static str> {
        match self {
            EngineError::Db(DbError::InvalidParams(_)) => None,
            EngineError::Llm(LlmError::InvalidParams(_) | LlmError::EmptyMessages) => None,
            EngineError::Store(StoreError::InvalidArgument(_)) => None,
            EngineError::Db(_) => Some("database"),
            EngineError::Llm(_) => Some("llm"),
            EngineError::Store(_) => Some("store"),
            EngineError::InvalidRequest(_) | EngineError::Parse(_) => None,
        }
    }

    pub fn is_invalid_request(&self) -> bool {
        !matches!(self, EngineError::Parse(_)) && self.backend().is_none()
    }
}
