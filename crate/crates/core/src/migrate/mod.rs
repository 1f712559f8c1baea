//! SQLite to PostgreSQL conversion for gold queries and fixture DDL.
//!
//! Conversion is token-level: a string- and comment-aware tokenizer feeds a
//! fixed list of rewrite rules. Inputs using constructs with no faithful
//! PostgreSQL equivalent get an explicit [`Verdict::Unconvertible`].

mod rules;
mod tokenizer;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use self::rules::{rule_catalog, RuleInfo, RuleScope};
pub use self::tokenizer::{render, tokenize, Token, TokenKind};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MigrateError {
    #[error("cannot tokenize input at character {offset}: {reason}")]
    TokenizeFailed { offset: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", content = "reason", rename_all = "snake_case")]
pub enum Verdict {
    Converted,
    Unconvertible(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversionOutcome {
    pub converted: Option<String>,
    pub applied_rules: Vec<String>,
    #[serde(flatten)]
    pub verdict: Verdict,
}

impl ConversionOutcome {
    pub fn is_converted(&self) -> bool {
        self.verdict == Verdict::Converted
    }
}

/// Facts about the target schema that some rules need: which names are
/// identifiers and which columns are boolean.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SchemaHints {
    pub identifiers: HashSet<String>,
    pub boolean_columns: HashSet<String>,
}

impl SchemaHints {
    /// Collects table and column names from SQLite `CREATE TABLE` statements.
    pub fn from_ddl(ddl: &str) -> Result<Self, MigrateError> {
        let tokens = tokenize(ddl)?;
        let mut hints = SchemaHints::default();
        for table in rules::create_tables(&tokens) {
            if let Some(name) = tokens[table.name].ident_name() {
                hints.identifiers.insert(name.to_lowercase());
            }
            for col in &table.columns {
                let Some(name) = tokens[col.name].ident_name() else { continue };
                let name = name.to_lowercase();
                let ty = render(&tokens[col.ty.0..col.ty.1]);
                if rules::map_column_type(&ty).as_deref() == Some("boolean") {
                    hints.boolean_columns.insert(name.clone());
                }
                hints.identifiers.insert(name);
            }
        }
        Ok(hints)
    }

    pub fn is_empty(&self) -> bool {
        self.identifiers.is_empty()
    }
}

/// Rule-based converter, optionally informed by the target schema.
#[derive(Debug, Clone, Default)]
pub struct Migrator {
    hints: SchemaHints,
}

impl Migrator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_hints(hints: SchemaHints) -> Self {
        Self { hints }
    }

    pub fn hints(&self) -> &SchemaHints {
        &self.hints
    }

    /// Converts one query.
    pub fn convert(&self, sqlite_sql: &str) -> Result<ConversionOutcome, MigrateError> {
        rules::run(sqlite_sql, &self.hints, false)
    }

    /// Converts `CREATE TABLE` statements, also mapping column types. Schema
    /// hints are derived from the DDL itself and merged with the
    /// migrator's own.
    pub fn convert_ddl(&self, sqlite_ddl: &str) -> Result<ConversionOutcome, MigrateError> {
        let mut hints = SchemaHints::from_ddl(sqlite_ddl)?;
        hints.identifiers.extend(self.hints.identifiers.iter().cloned());
        hints.boolean_columns.extend(self.hints.boolean_columns.iter().cloned());
        rules::run(sqlite_ddl, &hints, true)
    }
}

/// Converts one query without schema hints.
pub fn convert(sqlite_sql: &str) -> Result<ConversionOutcome, MigrateError> {
    Migrator::new().convert(sqlite_sql)
}

pub fn convert_ddl(sqlite_ddl: &str) -> Result<ConversionOutcome, MigrateError> {
    Migrator::new().convert_ddl(sqlite_ddl)
}

/// Splits a script into statements at top-level semicolons, dropping empty
/// ones. Semicolons inside literals and comments do not split.
pub fn split_statements(script: &str) -> Result<Vec<String>, MigrateError> {
    let tokens = tokenize(script)?;
    let mut out = Vec::new();
    let mut current: Vec<Token> = Vec::new();
    for t in tokens {
        if t.is_sym(";") {
            out.push(render(&current));
            current.clear();
        } else {
            current.push(t);
        }
    }
    out.push(render(&current));
    Ok(out.into_iter().map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect())
}
