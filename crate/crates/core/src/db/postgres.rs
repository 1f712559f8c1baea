use std::error::Error as _;
use std::time::Duration;

use chrono::{DateTime, NaiveDate, NaiveDateTime, NaiveTime, Utc};
use postgres::types::{FromSql, Kind, Type};
use postgres::{Client, NoTls, Row};

use super::{
    render_table_section, ColumnSpec, ConnectionParams, Connector, Database, DbError, ErrorDiagnostics, Execution,
    QueryResult, RawSchemaDump, Value,
};

const LIST_TABLES_SQL: &str = "\
SELECT table_schema::text, table_name::text
FROM information_schema.tables
WHERE table_type = 'BASE TABLE'
  AND table_schema NOT IN ('pg_catalog', 'information_schema')
  AND table_schema NOT LIKE 'pg\\_toast%'
  AND table_schema NOT LIKE 'pg\\_temp%'";

const TABLE_COLUMNS_SQL: &str = "\
SELECT column_name::text,
       CASE WHEN data_type IN ('USER-DEFINED', 'ARRAY') THEN udt_name::text
            WHEN character_maximum_length IS NOT NULL
                 THEN data_type || '(' || character_maximum_length || ')'
            ELSE data_type::text END,
       is_nullable = 'YES',
       column_default::text
FROM information_schema.columns
WHERE table_schema = $1 AND table_name = $2
ORDER BY ordinal_position";

/// A live read-only PostgreSQL session.
///
/// The session is opened with `default_transaction_read_only=on` and every
/// statement additionally runs inside an explicit `READ ONLY` transaction
/// that is always rolled back, so session-level `SET` commands issued by a
/// caller cannot outlive the statement that issued them.
pub struct PgConnection {
    client: Client,
    params: ConnectionParams,
}

impl PgConnection {
    pub fn connect(params: &ConnectionParams) -> Result<Self, DbError> {
        params.validate()?;
        let mut config = postgres::Config::new();
        config
            .host(&params.host)
            .port(params.port)
            .dbname(&params.dbname)
            .user(&params.user)
            .password(&params.password)
            .application_name("sqlqe")
            .options("-c default_transaction_read_only=on")
            .connect_timeout(Duration::from_secs(10));
        let connect_failed =
            |reason: String| DbError::ConnectFailed { host: params.host.clone(), port: params.port, reason };
        let mut client = config.connect(NoTls).map_err(|e| connect_failed(describe_pg_error(&e)))?;
        client
            .batch_execute("SET SESSION CHARACTERISTICS AS TRANSACTION READ ONLY")
            .map_err(|e| connect_failed(describe_pg_error(&e)))?;
        tracing::debug!(host = %params.host, port = params.port, db = %params.dbname, "connected read-only");
        Ok(Self { client, params: params.clone() })
    }

    pub fn params(&self) -> &ConnectionParams {
        &self.params
    }

    /// Runs an internal introspection statement and returns all rows.
    fn introspect(&mut self, sql: &str, params: &[&(dyn postgres::types::ToSql + Sync)]) -> Result<Vec<Row>, DbError> {
        let result = (|| {
            let mut tx = self.client.build_transaction().read_only(true).start()?;
            let rows = tx.query(sql, params);
            let _ = tx.rollback();
            rows
        })();
        result.map_err(|e| self.classify(e, sql, "introspect"))
    }

    fn classify(&self, e: postgres::Error, sql: &str, phase: &str) -> DbError {
        if self.client.is_closed() || e.as_db_error().is_none() && is_io_error(&e) {
            return DbError::ConnectionLost(describe_pg_error(&e));
        }
        DbError::QueryFailed(Box::new(diagnostics_from(&e, sql, phase)))
    }

    fn run_bounded(&mut self, sql: &str, row_limit: usize) -> Result<QueryResult, (postgres::Error, &'static str)> {
        let mut tx = self.client.build_transaction().read_only(true).start().map_err(|e| (e, "begin"))?;
        let outcome = (|| {
            let stmt = tx.prepare(sql).map_err(|e| (e, "prepare"))?;
            let portal = tx.bind(&stmt, &[]).map_err(|e| (e, "bind"))?;
            let fetch = i32::try_from(row_limit.saturating_add(1)).unwrap_or(i32::MAX);
            let rows = tx.query_portal(&portal, fetch).map_err(|e| (e, "fetch"))?;
            let columns: Vec<String> = stmt.columns().iter().map(|c| c.name().to_string()).collect();
            let truncated = rows.len() > row_limit;
            let mut out = Vec::with_capacity(rows.len().min(row_limit));
            for row in rows.iter().take(row_limit) {
                out.push(decode_row(row).map_err(|e| (e, "decode"))?);
            }
            Ok(QueryResult { columns, rows: out, truncated })
        })();
        let _ = tx.rollback();
        outcome
    }
}

impl Database for PgConnection {
    fn list_tables(&mut self) -> Result<Vec<String>, DbError> {
        let rows = self.introspect(LIST_TABLES_SQL, &[])?;
        let mut names: Vec<String> = rows
            .iter()
            .map(|r| {
                let schema: String = r.get(0);
                let name: String = r.get(1);
                if schema == "public" {
                    name
                } else {
                    format!("{schema}.{name}")
                }
            })
            .collect();
        names.sort();
        Ok(names)
    }

    fn get_table_schema(&mut self, table: &str) -> Result<Vec<ColumnSpec>, DbError> {
        let (schema, name) = split_qualified(table);
        let rows = self.introspect(TABLE_COLUMNS_SQL, &[&schema, &name])?;
        if rows.is_empty() {
            return Err(DbError::UnknownTable(table.to_string()));
        }
        Ok(rows
            .iter()
            .map(|r| ColumnSpec { name: r.get(0), data_type: r.get(1), is_nullable: r.get(2), default: r.get(3) })
            .collect())
    }

    fn get_schema_dump(&mut self, sample_rows: usize) -> Result<RawSchemaDump, DbError> {
        let tables = self.list_tables()?;
        let mut sections = Vec::with_capacity(tables.len());
        for table in &tables {
            let columns = self.get_table_schema(table)?;
            let sample = if sample_rows > 0 {
                let sql = format!("SELECT * FROM {} LIMIT {}", quote_qualified(table), sample_rows);
                match self.execute_readonly(&sql, sample_rows)? {
                    Execution::Rows(r) => Some(r),
                    Execution::Failed(d) => return Err(DbError::QueryFailed(Box::new(d))),
                }
            } else {
                None
            };
            sections.push(render_table_section(table, &columns, sample.as_ref()));
        }
        Ok(RawSchemaDump {
            markdown: sections.join("\n"),
            table_count: tables.len(),
            sample_rows_per_table: sample_rows,
        })
    }

    fn execute_readonly(&mut self, sql: &str, row_limit: usize) -> Result<Execution, DbError> {
        let row_limit = row_limit.max(1);
        match self.run_bounded(sql, row_limit) {
            Ok(result) => Ok(Execution::Rows(result)),
            Err((e, phase)) => {
                if self.client.is_closed() || (e.as_db_error().is_none() && is_io_error(&e)) {
                    return Err(DbError::ConnectionLost(describe_pg_error(&e)));
                }
                Ok(Execution::Failed(diagnostics_from(&e, sql, phase)))
            }
        }
    }
}

/// Opens [`PgConnection`]s from fixed parameters.
#[derive(Debug, Clone)]
pub struct PgConnector {
    params: ConnectionParams,
}

impl PgConnector {
    pub fn new(params: ConnectionParams) -> Result<Self, DbError> {
        params.validate()?;
        Ok(Self { params })
    }

    pub fn params(&self) -> &ConnectionParams {
        &self.params
    }
}

impl Connector for PgConnector {
    fn connect(&self) -> Result<Box<dyn Database>, DbError> {
        Ok(Box::new(PgConnection::connect(&self.params)?))
    }
}

fn is_io_error(e: &postgres::Error) -> bool {
    let mut source = e.source();
    while let Some(s) = source {
        if s.is::<std::io::Error>() {
            return true;
        }
        source = s.source();
    }
    e.to_string().contains("connection closed")
}

fn describe_pg_error(e: &postgres::Error) -> String {
    match e.as_db_error() {
        Some(db) => format!("{}: {}", db.code().code(), db.message()),
        None => match e.source() {
            Some(s) => format!("{e}: {s}"),
            None => e.to_string(),
        },
    }
}

fn split_qualified(table: &str) -> (String, String) {
    match table.split_once('.') {
        Some((schema, name)) => (schema.to_string(), name.to_string()),
        None => ("public".to_string(), table.to_string()),
    }
}

fn quote_ident(s: &str) -> String {
    format!("\"{}\"", s.replace('"', "\"\""))
}

fn quote_qualified(table: &str) -> String {
    let (schema, name) = split_qualified(table);
    format!("{}.{}", quote_ident(&schema), quote_ident(&name))
}

fn diagnostics_from(e: &postgres::Error, sql: &str, phase: &str) -> ErrorDiagnostics {
    match e.as_db_error() {
        Some(db) => {
            let code = db.code().code().to_string();
            let mut tb = format!("  in execute_readonly (phase: {phase})\n");
            if let Some(postgres::error::ErrorPosition::Original(pos)) = db.position() {
                tb.push_str(&caret_context(sql, *pos as usize));
            }
            if let Some(w) = db.where_() {
                tb.push_str(&format!("  context: {w}\n"));
            }
            if let Some(r) = db.routine() {
                tb.push_str(&format!("  routine: {r}\n"));
            }
            ErrorDiagnostics {
                error_type: error_class_name(&code).to_string(),
                message: db.message().to_string(),
                sqlstate: Some(code),
                diag_detail: db.detail().map(str::to_string),
                diag_hint: db.hint().map(str::to_string),
                traceback_text: tb,
            }
        }
        None => ErrorDiagnostics {
            error_type: "InterfaceError".into(),
            message: describe_pg_error(e),
            sqlstate: None,
            diag_detail: None,
            diag_hint: None,
            traceback_text: format!("  in execute_readonly (phase: {phase})\n"),
        },
    }
}

/// Points at a 1-based character position inside the statement.
fn caret_context(sql: &str, pos: usize) -> String {
    let chars: Vec<char> = sql.chars().collect();
    let idx = pos.saturating_sub(1).min(chars.len());
    let line_start = chars[..idx].iter().rposition(|c| *c == '\n').map_or(0, |p| p + 1);
    let line_end = chars[idx..].iter().position(|c| *c == '\n').map_or(chars.len(), |p| idx + p);
    let line: String = chars[line_start..line_end].iter().collect();
    format!("  at character {pos}:\n    {line}\n    {}^\n", " ".repeat(idx - line_start))
}

/// Exception class names in the style of the common Python PostgreSQL
/// drivers, falling back to the SQLSTATE class.
pub(crate) fn error_class_name(code: &str) -> &'static str {
    match code {
        "42P01" => "UndefinedTable",
        "42703" => "UndefinedColumn",
        "42601" => "SyntaxError",
        "42883" => "UndefinedFunction",
        "42804" => "DatatypeMismatch",
        "42P18" => "IndeterminateDatatype",
        "42702" => "AmbiguousColumn",
        "42725" => "AmbiguousFunction",
        "42803" => "GroupingError",
        "42P10" => "InvalidColumnReference",
        "42846" => "CannotCoerce",
        "42501" => "InsufficientPrivilege",
        "42P02" => "UndefinedParameter",
        "42704" => "UndefinedObject",
        "42712" => "DuplicateAlias",
        "42P09" => "AmbiguousAlias",
        "42P19" => "InvalidRecursion",
        "42P20" => "WindowingError",
        "42809" => "WrongObjectType",
        "42P07" => "DuplicateTable",
        "22012" => "DivisionByZero",
        "22P02" => "InvalidTextRepresentation",
        "22007" => "InvalidDatetimeFormat",
        "22008" => "DatetimeFieldOverflow",
        "22003" => "NumericValueOutOfRange",
        "22001" => "StringDataRightTruncation",
        "22023" => "InvalidParameterValue",
        "2201B" => "InvalidRegularExpression",
        "21000" => "CardinalityViolation",
        "25006" => "ReadOnlySqlTransaction",
        "25P02" => "InFailedSqlTransaction",
        "25001" => "ActiveSqlTransaction",
        "57014" => "QueryCanceled",
        "0A000" => "FeatureNotSupported",
        "3D000" => "InvalidCatalogName",
        "28P01" => "InvalidPassword",
        "23505" => "UniqueViolation",
        "23503" => "ForeignKeyViolation",
        "23502" => "NotNullViolation",
        "08P01" => "ProtocolViolation",
        _ => match code.get(..2).unwrap_or("") {
            "08" | "28" | "53" | "54" | "55" | "57" | "58" => "OperationalError",
            "0A" => "NotSupportedError",
            "21" | "22" => "DataError",
            "23" => "IntegrityError",
            "25" | "XX" => "InternalError",
            "40" => "TransactionRollbackError",
            "42" => "ProgrammingError",
            _ => "DatabaseError",
        },
    }
}

/// Accepts any type and hands back the raw binary wire representation.
struct Raw<'a>(&'a [u8]);

impl<'a> FromSql<'a> for Raw<'a> {
    fn from_sql(_: &Type, raw: &'a [u8]) -> Result<Self, Box<dyn std::error::Error + Sync + Send>> {
        Ok(Raw(raw))
    }

    fn accepts(_: &Type) -> bool {
        true
    }
}

fn decode_row(row: &Row) -> Result<Vec<Value>, postgres::Error> {
    (0..row.len()).map(|i| decode_cell(row, i)).collect()
}

fn opt<T>(v: Option<T>, f: impl FnOnce(T) -> Value) -> Value {
    v.map_or(Value::Null, f)
}

fn decode_cell(row: &Row, idx: usize) -> Result<Value, postgres::Error> {
    let ty = row.columns()[idx].type_().clone();
    let v = match ty {
        Type::BOOL => opt(row.try_get::<_, Option<bool>>(idx)?, Value::Bool),
        Type::INT2 => opt(row.try_get::<_, Option<i16>>(idx)?, |v| Value::Int(v.into())),
        Type::INT4 => opt(row.try_get::<_, Option<i32>>(idx)?, |v| Value::Int(v.into())),
        Type::INT8 => opt(row.try_get::<_, Option<i64>>(idx)?, Value::Int),
        Type::OID => opt(row.try_get::<_, Option<u32>>(idx)?, |v| Value::Int(v.into())),
        Type::CHAR => opt(row.try_get::<_, Option<i8>>(idx)?, |v| Value::Text(((v as u8) as char).to_string())),
        // shortest decimal form of the f32, not of its widened f64
        Type::FLOAT4 => {
            opt(row.try_get::<_, Option<f32>>(idx)?, |v| Value::Float(v.to_string().parse().unwrap_or(v as f64)))
        }
        Type::FLOAT8 => opt(row.try_get::<_, Option<f64>>(idx)?, Value::Float),
        Type::TEXT | Type::VARCHAR | Type::BPCHAR | Type::NAME | Type::UNKNOWN => {
            opt(row.try_get::<_, Option<String>>(idx)?, Value::Text)
        }
        Type::JSON | Type::JSONB => opt(row.try_get::<_, Option<serde_json::Value>>(idx)?, Value::Json),
        Type::DATE => opt(row.try_get::<_, Option<NaiveDate>>(idx)?, |d| Value::Text(d.format("%Y-%m-%d").to_string())),
        Type::TIME => {
            opt(row.try_get::<_, Option<NaiveTime>>(idx)?, |t| Value::Text(t.format("%H:%M:%S%.f").to_string()))
        }
        Type::TIMESTAMP => opt(row.try_get::<_, Option<NaiveDateTime>>(idx)?, |t| {
            Value::Text(t.format("%Y-%m-%dT%H:%M:%S%.f").to_string())
        }),
        Type::TIMESTAMPTZ => opt(row.try_get::<_, Option<DateTime<Utc>>>(idx)?, |t| {
            Value::Text(t.to_rfc3339_opts(chrono::SecondsFormat::AutoSi, true))
        }),
        Type::UUID => opt(row.try_get::<_, Option<uuid::Uuid>>(idx)?, |u| Value::Text(u.to_string())),
        Type::BYTEA => opt(row.try_get::<_, Option<Vec<u8>>>(idx)?, Value::Bytes),
        Type::NUMERIC => opt(row.try_get::<_, Option<Raw>>(idx)?, |r| decode_numeric(r.0)),
        Type::INTERVAL => opt(row.try_get::<_, Option<Raw>>(idx)?, |r| decode_interval(r.0)),
        _ => match ty.kind() {
            // enum labels travel as plain text in binary format
            Kind::Enum(_) => {
                opt(row.try_get::<_, Option<Raw>>(idx)?, |r| Value::Text(String::from_utf8_lossy(r.0).into_owned()))
            }
            Kind::Array(elem) => decode_array(row, idx, elem)?,
            _ if ty.name() == "citext" => {
                opt(row.try_get::<_, Option<Raw>>(idx)?, |r| Value::Text(String::from_utf8_lossy(r.0).into_owned()))
            }
            _ => opt(row.try_get::<_, Option<Raw>>(idx)?, |_| Value::Text(format!("<unsupported type {}>", ty.name()))),
        },
    };
    Ok(v)
}

fn json_array<T, F>(items: Option<Vec<Option<T>>>, f: F) -> Value
where
    F: Fn(T) -> serde_json::Value,
{
    opt(items, |items| {
        Value::Json(serde_json::Value::Array(
            items.into_iter().map(|x| x.map_or(serde_json::Value::Null, &f)).collect(),
        ))
    })
}

fn decode_array(row: &Row, idx: usize, elem: &Type) -> Result<Value, postgres::Error> {
    use serde_json::json;
    let v = match *elem {
        Type::BOOL => json_array(row.try_get::<_, Option<Vec<Option<bool>>>>(idx)?, |v| json!(v)),
        Type::INT2 => json_array(row.try_get::<_, Option<Vec<Option<i16>>>>(idx)?, |v| json!(v)),
        Type::INT4 => json_array(row.try_get::<_, Option<Vec<Option<i32>>>>(idx)?, |v| json!(v)),
        Type::INT8 => json_array(row.try_get::<_, Option<Vec<Option<i64>>>>(idx)?, |v| json!(v)),
        Type::FLOAT8 => json_array(row.try_get::<_, Option<Vec<Option<f64>>>>(idx)?, |v| json!(v)),
        Type::TEXT | Type::VARCHAR | Type::BPCHAR | Type::NAME => {
            json_array(row.try_get::<_, Option<Vec<Option<String>>>>(idx)?, |v| json!(v))
        }
        _ => {
            opt(row.try_get::<_, Option<Raw>>(idx)?, |_| Value::Text(format!("<unsupported array of {}>", elem.name())))
        }
    };
    Ok(v)
}

fn be_u16(b: &[u8], at: usize) -> u16 {
    u16::from_be_bytes([b[at], b[at + 1]])
}

/// Decodes the binary `numeric` wire format into its exact decimal text.
pub(crate) fn decode_numeric(raw: &[u8]) -> Value {
    if raw.len() < 8 {
        return Value::Text("<malformed numeric>".into());
    }
    let ndigits = be_u16(raw, 0) as usize;
    let weight = be_u16(raw, 2) as i16 as i32;
    let sign = be_u16(raw, 4);
    let dscale = be_u16(raw, 6) as usize;
    match sign {
        0xC000 => return Value::Decimal("NaN".into()),
        0xD000 => return Value::Decimal("Infinity".into()),
        0xF000 => return Value::Decimal("-Infinity".into()),
        _ => {}
    }
    if raw.len() < 8 + 2 * ndigits {
        return Value::Text("<malformed numeric>".into());
    }
    let digit = |i: i32| -> u16 {
        if i < 0 || i as usize >= ndigits {
            0
        } else {
            be_u16(raw, 8 + 2 * i as usize)
        }
    };
    let mut out = String::new();
    if sign == 0x4000 {
        out.push('-');
    }
    if weight < 0 {
        out.push('0');
    } else {
        for i in 0..=weight {
            if i == 0 {
                out.push_str(&digit(i).to_string());
            } else {
                out.push_str(&format!("{:04}", digit(i)));
            }
        }
    }
    if dscale > 0 {
        out.push('.');
        let mut frac = String::new();
        let mut i = weight + 1;
        while frac.len() < dscale {
            frac.push_str(&format!("{:04}", digit(i)));
            i += 1;
        }
        frac.truncate(dscale);
        out.push_str(&frac);
    }
    if out == "-0" || (out.starts_with("-0.") && out[1..].chars().all(|c| c == '0' || c == '.')) {
        out.remove(0);
    }
    Value::Decimal(out)
}

/// Decodes the binary `interval` format into PostgreSQL's default textual
/// style, e.g. `1 year 2 mons 3 days 04:05:06.5`.
pub(crate) fn decode_interval(raw: &[u8]) -> Value {
    if raw.len() != 16 {
        return Value::Text("<malformed interval>".into());
    }
    let micros = i64::from_be_bytes(raw[0..8].try_into().unwrap());
    let days = i32::from_be_bytes(raw[8..12].try_into().unwrap());
    let months = i32::from_be_bytes(raw[12..16].try_into().unwrap());
    let mut parts = Vec::new();
    let (years, mons) = (months / 12, months % 12);
    let unit = |n: i64, one: &str, many: &str| format!("{n} {}", if n.abs() == 1 { one } else { many });
    if years != 0 {
        parts.push(unit(years.into(), "year", "years"));
    }
    if mons != 0 {
        parts.push(unit(mons.into(), "mon", "mons"));
    }
    if days != 0 {
        parts.push(unit(days.into(), "day", "days"));
    }
    if micros != 0 || parts.is_empty() {
        let neg = micros < 0;
        let m = micros.unsigned_abs();
        let (h, rem) = (m / 3_600_000_000, m % 3_600_000_000);
        let (min, rem) = (rem / 60_000_000, rem % 60_000_000);
        let (s, us) = (rem / 1_000_000, rem % 1_000_000);
        let mut t = format!("{}{h:02}:{min:02}:{s:02}", if neg { "-" } else { "" });
        if us != 0 {
            let frac = format!("{us:06}");
            t.push('.');
            t.push_str(frac.trim_end_matches('0'));
        }
        parts.push(t);
    }
    Value::Text(parts.join(" "))
}
