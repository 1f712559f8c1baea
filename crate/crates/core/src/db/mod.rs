//! Read-only database access: connection parameters, schema introspection,
//! bounded execution and structured error capture.
//!
//! Query failures are data ([`Execution::Failed`]), not control flow. Only
//! transport-level problems (a dropped connection, a failed connect) surface
//! as [`DbError`].

mod postgres;
mod scripted;
mod value;

use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use self::postgres::{PgConnection, PgConnector};
pub use self::scripted::{ScriptedDatabase, ScriptedResponse};
pub use self::value::Value;

pub const DEFAULT_ROW_LIMIT: usize = 50;

#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConnectionParams {
    pub host: String,
    pub port: u16,
    pub dbname: String,
    pub user: String,
    pub password: String,
}

impl fmt::Debug for ConnectionParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ConnectionParams")
            .field("host", &self.host)
            .field("port", &self.port)
            .field("dbname", &self.dbname)
            .field("user", &self.user)
            .field("password", &"<redacted>")
            .finish()
    }
}

impl ConnectionParams {
    pub fn validate(&self) -> Result<(), DbError> {
        let empty =
            [("host", &self.host), ("dbname", &self.dbname), ("user", &self.user), ("password", &self.password)]
                .into_iter()
                .find(|(_, v)| v.is_empty());
        if let Some((name, _)) = empty {
            return Err(DbError::InvalidParams(format!("{name} must not be empty")));
        }
        if self.port == 0 {
            return Err(DbError::InvalidParams("port must be in 1..=65535".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub data_type: String,
    pub is_nullable: bool,
    pub default: Option<String>,
}

/// Markdown rendering of every user table with its columns and a few sample
/// rows. Each table contributes exactly one `## Table:` heading.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawSchemaDump {
    pub markdown: String,
    pub table_count: usize,
    pub sample_rows_per_table: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct QueryResult {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Value>>,
    /// True iff the row limit cut the result short.
    pub truncated: bool,
}

impl QueryResult {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Markdown table of the first `limit` rows. `None` renders all rows.
    pub fn to_markdown(&self, limit: Option<usize>) -> String {
        let rows = match limit {
            Some(k) => &self.rows[..k.min(self.rows.len())],
            None => &self.rows[..],
        };
        markdown_table(&self.columns, rows)
    }
}

/// Structured diagnostics for a failed statement.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorDiagnostics {
    pub error_type: String,
    pub message: String,
    pub sqlstate: Option<String>,
    pub diag_detail: Option<String>,
    pub diag_hint: Option<String>,
    pub traceback_text: String,
}

impl ErrorDiagnostics {
    pub fn summary(&self) -> String {
        match &self.sqlstate {
            Some(code) => format!("{} [{}]: {}", self.error_type, code, self.message),
            None => format!("{}: {}", self.error_type, self.message),
        }
    }
}

/// Multi-line rendering handed to the repair prompt. Lines appear in a fixed
/// order and optional fields are omitted entirely when absent.
pub fn format_error(e: &ErrorDiagnostics) -> String {
    let mut out = String::from("PostgreSQL error caught:\n");
    out.push_str(&format!("Error type: {}\n", e.error_type));
    out.push_str(&format!("Error message: {}\n", e.message));
    if let Some(code) = &e.sqlstate {
        out.push_str(&format!("SQLSTATE code: {code}\n"));
    }
    if let Some(detail) = &e.diag_detail {
        out.push_str(&format!("PostgreSQL diag.message_detail: {detail}\n"));
    }
    if let Some(hint) = &e.diag_hint {
        out.push_str(&format!("PostgreSQL diag.message_hint: {hint}\n"));
    }
    if !e.traceback_text.is_empty() {
        out.push_str("Traceback:\n");
        out.push_str(&e.traceback_text);
        if !e.traceback_text.ends_with('\n') {
            out.push('\n');
        }
    }
    out
}

/// Outcome of running one statement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Execution {
    Rows(QueryResult),
    Failed(ErrorDiagnostics),
}

impl Execution {
    pub fn rows(&self) -> Option<&QueryResult> {
        match self {
            Execution::Rows(r) => Some(r),
            Execution::Failed(_) => None,
        }
    }

    pub fn error(&self) -> Option<&ErrorDiagnostics> {
        match self {
            Execution::Rows(_) => None,
            Execution::Failed(e) => Some(e),
        }
    }

    pub fn has_rows(&self) -> bool {
        self.rows().is_some_and(|r| !r.rows.is_empty())
    }
}

#[derive(Debug, Error)]
pub enum DbError {
    #[error("invalid connection parameters: {0}")]
    InvalidParams(String),
    #[error("could not connect to PostgreSQL at {host}:{port}: {reason}")]
    ConnectFailed { host: String, port: u16, reason: String },
    #[error("database connection lost: {0}")]
    ConnectionLost(String),
    #[error("unknown table: {0}")]
    UnknownTable(String),
    #[error("introspection query failed: {}", .0.summary())]
    QueryFailed(Box<ErrorDiagnostics>),
}

/// Read-only gateway operations. Implementations are not shared between
/// threads; callers check one out per request.
pub trait Database: Send {
    fn list_tables(&mut self) -> Result<Vec<String>, DbError>;

    fn get_table_schema(&mut self, table: &str) -> Result<Vec<ColumnSpec>, DbError>;

    fn get_schema_dump(&mut self, sample_rows: usize) -> Result<RawSchemaDump, DbError>;

    /// Runs `sql` fetching at most `row_limit` rows. A failure is rolled back
    /// before returning so the connection is immediately reusable.
    fn execute_readonly(&mut self, sql: &str, row_limit: usize) -> Result<Execution, DbError>;
}

impl<D: Database + ?Sized> Database for Box<D> {
    fn list_tables(&mut self) -> Result<Vec<String>, DbError> {
        (**self).list_tables()
    }

    fn get_table_schema(&mut self, table: &str) -> Result<Vec<ColumnSpec>, DbError> {
        (**self).get_table_schema(table)
    }

    fn get_schema_dump(&mut self, sample_rows: usize) -> Result<RawSchemaDump, DbError> {
        (**self).get_schema_dump(sample_rows)
    }

    fn execute_readonly(&mut self, sql: &str, row_limit: usize) -> Result<Execution, DbError> {
        (**self).execute_readonly(sql, row_limit)
    }
}

/// Opens new gateway connections.
pub trait Connector: Send + Sync {
    fn connect(&self) -> Result<Box<dyn Database>, DbError>;
}

impl<F> Connector for F
where
    F: Fn() -> Result<Box<dyn Database>, DbError> + Send + Sync,
{
    fn connect(&self) -> Result<Box<dyn Database>, DbError> {
        self()
    }
}

/// Connects on first use, so request paths that never touch the database
/// (a warm schema cache, for instance) never open a connection.
pub struct LazyDatabase<'c> {
    connector: &'c dyn Connector,
    conn: Option<Box<dyn Database>>,
}

impl<'c> LazyDatabase<'c> {
    pub fn new(connector: &'c dyn Connector) -> Self {
        Self { connector, conn: None }
    }

    pub fn is_connected(&self) -> bool {
        self.conn.is_some()
    }

    pub fn get(&mut self) -> Result<&mut dyn Database, DbError> {
        if self.conn.is_none() {
            self.conn = Some(self.connector.connect()?);
        }
        Ok(self.conn.as_deref_mut().expect("connected above"))
    }
}

/// Per-operation call counters shared by every connection a
/// [`CountingConnector`] hands out.
#[derive(Debug, Default)]
pub struct DbCallCounts {
    pub connects: AtomicUsize,
    pub list_tables: AtomicUsize,
    pub table_schemas: AtomicUsize,
    pub schema_dumps: AtomicUsize,
    pub executions: AtomicUsize,
}

impl DbCallCounts {
    /// Introspection statements issued so far.
    pub fn introspection(&self) -> usize {
        self.list_tables.load(Ordering::SeqCst)
            + self.table_schemas.load(Ordering::SeqCst)
            + self.schema_dumps.load(Ordering::SeqCst)
    }

    pub fn executions(&self) -> usize {
        self.executions.load(Ordering::SeqCst)
    }

    pub fn connects(&self) -> usize {
        self.connects.load(Ordering::SeqCst)
    }
}

/// Statement-counting proxy around any [`Database`].
pub struct CountingDatabase<D> {
    inner: D,
    counts: Arc<DbCallCounts>,
}

impl<D: Database> CountingDatabase<D> {
    pub fn new(inner: D, counts: Arc<DbCallCounts>) -> Self {
        Self { inner, counts }
    }
}

impl<D: Database> Database for CountingDatabase<D> {
    fn list_tables(&mut self) -> Result<Vec<String>, DbError> {
        self.counts.list_tables.fetch_add(1, Ordering::SeqCst);
        self.inner.list_tables()
    }

    fn get_table_schema(&mut self, table: &str) -> Result<Vec<ColumnSpec>, DbError> {
        self.counts.table_schemas.fetch_add(1, Ordering::SeqCst);
        self.inner.get_table_schema(table)
    }

    fn get_schema_dump(&mut self, sample_rows: usize) -> Result<RawSchemaDump, DbError> {
        self.counts.schema_dumps.fetch_add(1, Ordering::SeqCst);
        self.inner.get_schema_dump(sample_rows)
    }

    fn execute_readonly(&mut self, sql: &str, row_limit: usize) -> Result<Execution, DbError> {
        self.counts.executions.fetch_add(1, Ordering::SeqCst);
        self.inner.execute_readonly(sql, row_limit)
    }
}

pub struct CountingConnector<C> {
    inner: C,
    counts: Arc<DbCallCounts>,
}

impl<C: Connector> CountingConnector<C> {
    pub fn new(inner: C) -> Self {
        Self { inner, counts: Arc::default() }
    }

    pub fn counts(&self) -> Arc<DbCallCounts> {
        self.counts.clone()
    }
}

impl<C: Connector> Connector for CountingConnector<C> {
    fn connect(&self) -> Result<Box<dyn Database>, DbError> {
        self.counts.connects.fetch_add(1, Ordering::SeqCst);
        let db = self.inner.connect()?;
        Ok(Box::new(CountingDatabase::new(db, self.counts.clone())))
    }
}

fn escape_cell(s: &str) -> String {
    s.replace('|', "\\|").replace("\r\n", " ").replace('\n', " ")
}

/// Markdown table with a header row, a `---` separator row, and `NULL` for
/// nulls.
pub fn markdown_table(columns: &[String], rows: &[Vec<Value>]) -> String {
    let mut out = String::new();
    out.push_str("| ");
    out.push_str(&columns.iter().map(|c| escape_cell(c)).collect::<Vec<_>>().join(" | "));
    out.push_str(" |\n|");
    out.push_str(&vec![" --- |"; columns.len()].concat());
    out.push('\n');
    for row in rows {
        out.push_str("| ");
        out.push_str(&row.iter().map(|v| escape_cell(&v.render())).collect::<Vec<_>>().join(" | "));
        out.push_str(" |\n");
    }
    out
}

/// Renders one table section of a schema dump.
pub(crate) fn render_table_section(table: &str, columns: &[ColumnSpec], sample: Option<&QueryResult>) -> String {
    let mut out = format!("## Table: {table}\n\n");
    out.push_str("| column | type | nullable | default |\n| --- | --- | --- | --- |\n");
    for c in columns {
        out.push_str(&format!(
            "| {} | {} | {} | {} |\n",
            escape_cell(&c.name),
            escape_cell(&c.data_type),
            if c.is_nullable { "YES" } else { "NO" },
            c.default.as_deref().map(escape_cell).unwrap_or_default(),
        ));
    }
    if let Some(sample) = sample {
        if !sample.rows.is_empty() {
            out.push_str(&format!("\nSample rows ({}):\n\n", sample.rows.len()));
            out.push_str(&markdown_table(&sample.columns, &sample.rows));
        }
    }
    out
}
