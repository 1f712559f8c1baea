#![allow(dead_code)]

use rusqlite::types::ValueRef;
use sqlqe_core::db::{QueryResult, Value};
use sqlqe_core::testkit::fixture_path;

fn read(name: &str) -> String {
    std::fs::read_to_string(fixture_path(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

/// SQLite DDL of the migration fixture.
pub fn migrate_schema() -> String {
    read("migrate/schema.sql")
}

/// Portable INSERT statements loaded into both engines.
pub fn migrate_data() -> String {
    read("migrate/data.sql")
}

/// SQLite queries of the semantic-equivalence corpus.
pub fn migrate_corpus() -> Vec<String> {
    read("migrate/corpus.sql")
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with("--"))
        .map(String::from)
        .collect()
}

pub fn sqlite_fixture() -> rusqlite::Connection {
    let c = rusqlite::Connection::open_in_memory().unwrap();
    c.execute_batch(&migrate_schema()).unwrap();
    c.execute_batch(&migrate_data()).unwrap();
    c
}

pub fn sqlite_query(c: &rusqlite::Connection, sql: &str) -> QueryResult {
    let mut stmt = c.prepare(sql).unwrap_or_else(|e| panic!("sqlite rejected {sql}: {e}"));
    let columns: Vec<String> = stmt.column_names().iter().map(|s| s.to_string()).collect();
    let width = columns.len();
    let rows = stmt
        .query_map([], |row| {
            (0..width)
                .map(|i| {
                    Ok(match row.get_ref(i)? {
                        ValueRef::Null => Value::Null,
                        ValueRef::Integer(n) => Value::Int(n),
                        ValueRef::Real(f) => Value::Float(f),
                        ValueRef::Text(t) => Value::Text(String::from_utf8_lossy(t).into_owned()),
                        ValueRef::Blob(b) => Value::Bytes(b.to_vec()),
                    })
                })
                .collect::<Result<Vec<_>, rusqlite::Error>>()
        })
        .unwrap()
        .collect::<Result<Vec<_>, _>>()
        .unwrap();
    QueryResult { columns, rows, truncated: false }
}
