use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::{
    render_table_section, ColumnSpec, Connector, Database, DbError, ErrorDiagnostics, Execution, QueryResult,
    RawSchemaDump, Value,
};

/// Canned outcome for one SQL text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptedResponse {
    Rows { columns: Vec<String>, rows: Vec<Vec<Value>> },
    Error { sqlstate: String, error_type: String, message: String, hint: Option<String> },
    ConnectionLost,
}

impl ScriptedResponse {
    pub fn rows(columns: &[&str], rows: Vec<Vec<Value>>) -> Self {
        ScriptedResponse::Rows { columns: columns.iter().map(|c| c.to_string()).collect(), rows }
    }

    pub fn empty(columns: &[&str]) -> Self {
        Self::rows(columns, Vec::new())
    }

    pub fn error(sqlstate: &str, error_type: &str, message: &str) -> Self {
        ScriptedResponse::Error {
            sqlstate: sqlstate.into(),
            error_type: error_type.into(),
            message: message.into(),
            hint: None,
        }
    }
}

#[derive(Default)]
struct State {
    tables: Vec<(String, Vec<ColumnSpec>)>,
    responses: HashMap<String, ScriptedResponse>,
    executed: Vec<String>,
}

/// In-memory stand-in for a PostgreSQL connection. Every clone shares the
/// same script and execution log, so it can also serve as its own
/// [`Connector`].
///
/// Statements are matched after collapsing runs of whitespace; unknown
/// statements fail with SQLSTATE 42601.
#[derive(Clone, Default)]
pub struct ScriptedDatabase {
    state: Arc<Mutex<State>>,
}

fn key(sql: &str) -> String {
    sql.split_whitespace().collect::<Vec<_>>().join(" ")
}

impl ScriptedDatabase {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_table(self, name: &str, columns: &[(&str, &str)]) -> Self {
        let specs = columns
            .iter()
            .map(|(n, t)| ColumnSpec {
                name: n.to_string(),
                data_type: t.to_string(),
                is_nullable: true,
                default: None,
            })
            .collect();
        self.state.lock().unwrap().tables.push((name.to_string(), specs));
        self
    }

    pub fn respond(self, sql: &str, response: ScriptedResponse) -> Self {
        self.set_response(sql, response);
        self
    }

    pub fn set_response(&self, sql: &str, response: ScriptedResponse) {
        self.state.lock().unwrap().responses.insert(key(sql), response);
    }

    /// Statements executed so far, in order.
    pub fn executed(&self) -> Vec<String> {
        self.state.lock().unwrap().executed.clone()
    }
}

impl Database for ScriptedDatabase {
    fn list_tables(&mut self) -> Result<Vec<String>, DbError> {
        let mut names: Vec<String> = self.state.lock().unwrap().tables.iter().map(|(n, _)| n.clone()).collect();
        names.sort();
        Ok(names)
    }

    fn get_table_schema(&mut self, table: &str) -> Result<Vec<ColumnSpec>, DbError> {
        let state = self.state.lock().unwrap();
        state
            .tables
            .iter()
            .find(|(n, _)| n == table)
            .map(|(_, c)| c.clone())
            .ok_or_else(|| DbError::UnknownTable(table.to_string()))
    }

    fn get_schema_dump(&mut self, sample_rows: usize) -> Result<RawSchemaDump, DbError> {
        let tables = self.list_tables()?;
        let mut sections = Vec::new();
        for t in &tables {
            let cols = self.get_table_schema(t)?;
            sections.push(render_table_section(t, &cols, None));
        }
        Ok(RawSchemaDump {
            markdown: sections.join("\n"),
            table_count: tables.len(),
            sample_rows_per_table: sample_rows,
        })
    }

    fn execute_readonly(&mut self, sql: &str, row_limit: usize) -> Result<Execution, DbError> {
        let row_limit = row_limit.max(1);
        let mut state = self.state.lock().unwrap();
        state.executed.push(sql.to_string());
        let response = state.responses.get(&key(sql)).cloned();
        Ok(match response {
            Some(ScriptedResponse::Rows { columns, mut rows }) => {
                let truncated = rows.len() > row_limit;
                rows.truncate(row_limit);
                Execution::Rows(QueryResult { columns, rows, truncated })
            }
            Some(ScriptedResponse::Error { sqlstate, error_type, message, hint }) => {
                Execution::Failed(ErrorDiagnostics {
                    error_type,
                    message,
                    sqlstate: Some(sqlstate),
                    diag_detail: None,
                    diag_hint: hint,
                    traceback_text: "  in execute_readonly (scripted)\n".into(),
                })
            }
            Some(ScriptedResponse::ConnectionLost) => {
                return Err(DbError::ConnectionLost("scripted disconnect".into()))
            }
            None => Execution::Failed(ErrorDiagnostics {
                error_type: "SyntaxError".into(),
                message: format!("no scripted response for statement: {}", key(sql)),
                sqlstate: Some("42601".into()),
                diag_detail: None,
                diag_hint: None,
                traceback_text: "  in execute_readonly (scripted)\n".into(),
            }),
        })
    }
}

impl Connector for ScriptedDatabase {
    fn connect(&self) -> Result<Box<dyn Database>, DbError> {
        Ok(Box::new(self.clone()))
    }
}
