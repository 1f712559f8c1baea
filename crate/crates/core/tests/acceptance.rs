//! Acceptance suite. Prints one PASS/FAIL line per criterion and fails if
//! any criterion fails. Criterion 10 talks to live backends and is ignored
//! by default.

mod common;

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde_json::{json, Value as JsonValue};
use sqlqe_core::api::{resolve_chat_id, router, AppState};
use sqlqe_core::config::Config;
use sqlqe_core::db::{
    Connector, CountingConnector, Database, PgConnection, PgConnector, ScriptedDatabase, ScriptedResponse, Value,
};
use sqlqe_core::engine::{Backends, Engine, EngineSettings, RunOptions};
use sqlqe_core::evaluator::EvaluationOutcome;
use sqlqe_core::events::{frame, parse_frame, stream_channel, MemoryBus, ProgressEvent, DELIMITER};
use sqlqe_core::generator::{ContextSource, SchemaContext};
use sqlqe_core::harness::{
    compare, latency_stats, load_questions, normalize, run_benchmark, AblationConfig, BenchEnv, BenchmarkQuestion,
    BenchmarkReport,
};
use sqlqe_core::llm::{Playbook, ScriptEntry, ScriptedLlm};
use sqlqe_core::migrate::{Migrator, SchemaHints, Verdict};
use sqlqe_core::parser::{parse_evaluation, parse_generation, ParseStrategy};
use sqlqe_core::session::SessionStore;
use sqlqe_core::testkit::{self, ScriptedStack};
use tower::ServiceExt;

type Check = Result<(), String>;
type Criterion = (u32, &'static str, fn() -> Check);

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err(format!($($arg)+));
        }
    };
}

macro_rules! ensure_eq {
    ($left:expr, $right:expr, $what:expr) => {{
        let (l, r) = (&$left, &$right);
        if l != r {
            return Err(format!("{}: expected {:?}, got {:?}", $what, r, l));
        }
    }};
}

fn run_criterion(n: u32, title: &str, check: fn() -> Check) -> bool {
    let start = Instant::now();
    let result = catch_unwind(check).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    let line = match &result {
        Ok(()) => format!("criterion {n:>2}: PASS  {title} ({secs:.2}s)"),
        Err(e) => format!("criterion {n:>2}: FAIL  {title}: {e}"),
    };
    writeln!(std::io::stdout().lock(), "{line}").unwrap();
    result.is_ok()
}

#[test]
fn acceptance() {
    let criteria: [Criterion; 9] = [
        (1, "repair loop scenarios", c1_loop_scenarios),
        (2, "row-returning first query is never repaired", c2_first_rows_kept),
        (3, "isValid never affects control flow", c3_is_valid_ignored),
        (4, "parser cascade corpus and fuzzing", c4_parser),
        (5, "read-only gateway", c5_read_only_gateway),
        (6, "event frames and OpenAI wire format", c6_wire_format),
        (7, "dialect migration", c7_migration),
        (8, "benchmark harness", c8_harness),
        (9, "schema context caching", c9_context_cache),
    ];
    let failed: Vec<u32> =
        criteria.into_iter().filter(|(n, t, f)| !run_criterion(*n, t, *f)).map(|(n, _, _)| n).collect();
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}

// ---- shared helpers ----

fn gen_reply(query: &str) -> String {
    json!({"description": "answer", "query": query}).to_string()
}

fn repair_reply(query: &str, is_valid: bool) -> String {
    json!({"isValid": is_valid, "observation": "fix it", "modifiedUserPrompt": "", "fixedQuery": query}).to_string()
}

fn int_rows(n: i64) -> ScriptedResponse {
    ScriptedResponse::rows(&["n"], (0..n).map(|i| vec![Value::Int(i)]).collect())
}

fn undefined_column(col: &str) -> ScriptedResponse {
    ScriptedResponse::error("42703", "UndefinedColumn", &format!("column \"{col}\" does not exist"))
}

fn payload() -> Option<SchemaContext> {
    Some(SchemaContext::payload("Table t(n integer)."))
}

fn event_tags(s: &ScriptedStack, chat: &str) -> Vec<String> {
    s.events(chat).into_iter().map(|e| format!("{}:{}", e.component, e.event)).collect()
}

fn tags(names: &[&str]) -> Vec<String> {
    names.iter().map(|n| format!("SQLQueryEvaluator:{n}")).collect()
}

fn runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build().unwrap()
}

// ---- criterion 1 ----

struct Counts {
    executions: usize,
    llm_calls: usize,
    events: Vec<String>,
}

fn evaluate_scripted(
    db: ScriptedDatabase,
    llm: Vec<ScriptEntry>,
    query: &str,
    n: usize,
) -> (EvaluationOutcome, Counts) {
    let s = ScriptedStack::new(db, ScriptedLlm::new(llm));
    let out = s.engine.evaluate("c1", query, "question", payload(), &RunOptions::with_retry_count(n)).unwrap();
    let counts =
        Counts { executions: s.db_counts.executions(), llm_calls: s.llm.calls(), events: event_tags(&s, "c1") };
    (out, counts)
}

fn c1_loop_scenarios() -> Check {
    let start = Instant::now();

    // early accept
    let db = ScriptedDatabase::new().respond("SELECT n FROM t", int_rows(3));
    let (out, c) = evaluate_scripted(db, vec![ScriptEntry::text(repair_reply("SELECT x", true))], "SELECT n FROM t", 5);
    ensure_eq!((c.executions, c.llm_calls), (1, 0), "early accept executions/llm");
    ensure!(
        out.early_accepted && out.iterations_used == 1 && out.result.rows.len() == 3,
        "early accept outcome {out:?}"
    );
    ensure_eq!(c.events, tags(&["QueryExecution#1", "finalResult"]), "early accept events");

    // single shot (no repairs)
    let db = ScriptedDatabase::new().respond("SELECT bad FROM t", undefined_column("bad"));
    let (out, c) =
        evaluate_scripted(db, vec![ScriptEntry::text(repair_reply("SELECT n FROM t", false))], "SELECT bad FROM t", 0);
    ensure_eq!((c.executions, c.llm_calls, out.repair_calls), (1, 0, 0), "single shot executions/llm/repairs");
    ensure!(out.final_error.as_ref().and_then(|e| e.sqlstate.as_deref()) == Some("42703"), "single shot error {out:?}");
    ensure_eq!(out.query.as_str(), "SELECT bad FROM t", "single shot query");
    ensure_eq!(c.events, tags(&["QueryExecution#1", "finalResult"]), "single shot events");

    // exhaustion keeps the best result
    let db = ScriptedDatabase::new()
        .respond("SELECT n FROM t WHERE false", ScriptedResponse::empty(&["n"]))
        .respond("SELECT bad1 FROM t", undefined_column("bad1"))
        .respond("SELECT bad2 FROM t", undefined_column("bad2"));
    let llm = vec![
        ScriptEntry::text(repair_reply("SELECT bad1 FROM t", false)),
        ScriptEntry::text(repair_reply("SELECT bad2 FROM t", false)),
    ];
    let (out, c) = evaluate_scripted(db, llm, "SELECT n FROM t WHERE false", 2);
    ensure_eq!((c.executions, c.llm_calls, out.repair_calls), (3, 2, 2), "exhaustion executions/llm/repairs");
    ensure_eq!(out.query.as_str(), "SELECT n FROM t WHERE false", "exhaustion keeps attempt 1");
    ensure!(
        out.result.rows.is_empty() && out.final_error.is_none() && !out.early_accepted,
        "exhaustion outcome {out:?}"
    );
    ensure_eq!(
        c.events,
        tags(&[
            "QueryExecution#1",
            "QueryFixAttempt#1",
            "QueryExecution#2",
            "QueryFixAttempt#2",
            "QueryExecution#3",
            "finalResult"
        ]),
        "exhaustion events"
    );

    // every attempt errors
    let db = ScriptedDatabase::new()
        .respond("SELECT bad0 FROM t", undefined_column("bad0"))
        .respond("SELECT bad1 FROM t", undefined_column("bad1"))
        .respond("SELECT bad2 FROM t", undefined_column("bad2"));
    let llm = vec![
        ScriptEntry::text(repair_reply("SELECT bad1 FROM t", false)),
        ScriptEntry::text(repair_reply("SELECT bad2 FROM t", false)),
    ];
    let (out, c) = evaluate_scripted(db, llm, "SELECT bad0 FROM t", 2);
    ensure_eq!((c.executions, c.llm_calls), (3, 2), "all-error executions/llm");
    ensure_eq!(out.attempts.iter().filter(|a| a.repair.is_some()).count(), 2, "all-error repair records");
    ensure_eq!(out.query.as_str(), "SELECT bad2 FROM t", "all-error returns the last query");
    ensure!(out.result.rows.is_empty(), "all-error rows must be empty");
    ensure!(
        out.final_error.as_ref().is_some_and(|e| e.message.contains("bad2")),
        "all-error final error {:?}",
        out.final_error
    );
    ensure_eq!(c.events.len(), 6, "all-error event count");

    // fail then fix
    let db = ScriptedDatabase::new()
        .respond("SELECT order_date FROM orders", undefined_column("order_date"))
        .respond("SELECT created_at FROM orders", int_rows(4));
    let llm = vec![ScriptEntry::text(repair_reply("SELECT created_at FROM orders", false))];
    let (out, c) = evaluate_scripted(db, llm, "SELECT order_date FROM orders", 5);
    ensure_eq!((c.executions, c.llm_calls, out.repair_calls), (2, 1, 1), "fail-then-fix executions/llm/repairs");
    ensure!(
        out.early_accepted && out.iterations_used == 2 && out.result.rows.len() == 4,
        "fail-then-fix outcome {out:?}"
    );
    ensure_eq!(
        c.events,
        tags(&["QueryExecution#1", "QueryFixAttempt#1", "QueryExecution#2", "finalResult"]),
        "fail-then-fix events"
    );

    ensure!(start.elapsed() < Duration::from_secs(5), "took {:?}", start.elapsed());
    Ok(())
}

// ---- criterion 2 ----

fn random_ident(rng: &mut StdRng) -> String {
    let len = rng.gen_range(1..8);
    (0..len).map(|_| rng.gen_range(b'a'..=b'z') as char).collect()
}

fn c2_first_rows_kept() -> Check {
    let mut rng = StdRng::seed_from_u64(0x5eed_0002);
    for case in 0..1000 {
        let query = format!("SELECT {} FROM {}", random_ident(&mut rng), random_ident(&mut rng));
        let ncols = rng.gen_range(1..=3);
        let cols: Vec<String> = (0..ncols).map(|i| format!("c{i}")).collect();
        let col_refs: Vec<&str> = cols.iter().map(String::as_str).collect();
        let rows: Vec<Vec<Value>> = (0..rng.gen_range(1..=5))
            .map(|_| (0..ncols).map(|_| Value::Int(rng.gen_range(-1000..1000))).collect())
            .collect();
        let mut db = ScriptedDatabase::new()
            .with_table("t", &[("n", "integer")])
            .respond(&query, ScriptedResponse::rows(&col_refs, rows.clone()));
        let mut llm = vec![ScriptEntry::text("A table."), ScriptEntry::text(gen_reply(&query))];
        for _ in 0..rng.gen_range(0..6) {
            let other = format!("SELECT {} FROM t", random_ident(&mut rng));
            db = db.respond(&other, int_rows(rng.gen_range(0..3)));
            llm.push(ScriptEntry::text(repair_reply(&other, rng.gen_bool(0.5))));
        }
        let n = rng.gen_range(0..=7);
        let s = ScriptedStack::new(db, ScriptedLlm::new(llm));
        let out = s
            .engine
            .run_with(&format!("p{case}"), "question", &RunOptions::with_retry_count(n))
            .map_err(|e| format!("case {case}: {e}"))?;
        let e = &out.evaluation;
        ensure_eq!(e.query.as_str(), query.as_str(), format!("case {case} query"));
        ensure_eq!(e.result.rows, rows, format!("case {case} rows"));
        ensure_eq!(
            (e.repair_calls, s.llm.calls(), s.db_counts.executions()),
            (0, 2, 1),
            format!("case {case} repairs/llm/executions")
        );
        ensure!(e.early_accepted, "case {case} not early accepted");
    }
    Ok(())
}

// ---- criterion 3 ----

#[derive(Clone)]
enum Step {
    Repair { query: String, observation: String, prompt: String, valid: bool, as_string: bool },
    Garbage(String),
    Fail,
}

impl Step {
    fn entry(&self, flip: bool) -> ScriptEntry {
        match self {
            Step::Repair { query, observation, prompt, valid, as_string } => {
                let v = *valid != flip;
                let valid_json = if *as_string { json!(v.to_string()) } else { json!(v) };
                ScriptEntry::text(
                    json!({"isValid": valid_json, "observation": observation, "modifiedUserPrompt": prompt, "fixedQuery": query})
                        .to_string(),
                )
            }
            Step::Garbage(t) => ScriptEntry::text(t.clone()),
            Step::Fail => ScriptEntry::fail("upstream timeout"),
        }
    }
}

struct Trace {
    outcome: String,
    executed: Vec<String>,
    published: Vec<(String, String)>,
    requests: String,
}

fn trace(db_script: &[(String, ScriptedResponse)], steps: &[Step], flip: bool, n: usize) -> Result<Trace, String> {
    let db = db_script.iter().fold(ScriptedDatabase::new(), |db, (q, r)| db.respond(q, r.clone()));
    let s = ScriptedStack::new(db, ScriptedLlm::new(steps.iter().map(|st| st.entry(flip))));
    let out = s
        .engine
        .evaluate("flip", &db_script[0].0, "question", payload(), &RunOptions::with_retry_count(n))
        .map_err(|e| e.to_string())?;
    Ok(Trace {
        outcome: serde_json::to_string(&out).unwrap(),
        executed: s.db.executed(),
        published: s.bus.publish_log().into_iter().map(|r| (r.channel, r.payload)).collect(),
        requests: serde_json::to_string(&s.llm.requests()).unwrap(),
    })
}

fn c3_is_valid_ignored() -> Check {
    let mut rng = StdRng::seed_from_u64(0x5eed_0003);
    for case in 0..200 {
        let pool: Vec<String> =
            (0..rng.gen_range(2..6)).map(|i| format!("SELECT c{i} FROM t{}", random_ident(&mut rng))).collect();
        let db_script: Vec<(String, ScriptedResponse)> = pool
            .iter()
            .map(|q| {
                let r = match rng.gen_range(0..3) {
                    0 => undefined_column("c"),
                    1 => ScriptedResponse::empty(&["n"]),
                    _ => int_rows(rng.gen_range(1..4)),
                };
                (q.clone(), r)
            })
            .collect();
        let steps: Vec<Step> = (0..rng.gen_range(1..7))
            .map(|_| match rng.gen_range(0..10) {
                0 => Step::Fail,
                1 => Step::Garbage("I cannot help with that.".into()),
                _ => Step::Repair {
                    query: pool[rng.gen_range(0..pool.len())].clone(),
                    observation: random_ident(&mut rng),
                    prompt: if rng.gen_bool(0.5) { String::new() } else { random_ident(&mut rng) },
                    valid: rng.gen_bool(0.5),
                    as_string: rng.gen_bool(0.3),
                },
            })
            .collect();
        let n = rng.gen_range(0..6);
        let a = trace(&db_script, &steps, false, n).map_err(|e| format!("case {case}: {e}"))?;
        let b = trace(&db_script, &steps, true, n).map_err(|e| format!("case {case}: {e}"))?;
        ensure_eq!(a.outcome, b.outcome, format!("case {case} outcome"));
        ensure_eq!(a.executed, b.executed, format!("case {case} executed"));
        ensure_eq!(a.published, b.published, format!("case {case} publish log"));
        ensure_eq!(a.requests, b.requests, format!("case {case} LLM requests"));
    }
    Ok(())
}

// ---- criterion 4 ----

enum Shape {
    Gen,
    Eval,
}

fn parser_corpus() -> Vec<(Shape, &'static str, ParseStrategy, &'static str)> {
    use ParseStrategy::*;
    use Shape::*;
    vec![
        // direct JSON
        (Gen, r#"{"description":"c","query":"SELECT count(*) FROM t"}"#, DirectJson, "SELECT count(*) FROM t"),
        (Gen, r#"{"sql":"SELECT 1"}"#, DirectJson, "SELECT 1"),
        (Gen, "  \n{\"query\": \"SELECT 2\"}\n  ", DirectJson, "SELECT 2"),
        (Gen, r#"<think>plan {"query":"SELECT 0"}</think>{"query":"SELECT 3"}"#, DirectJson, "SELECT 3"),
        (Gen, r#"{"query":"SELECT '{}' AS braces"}"#, DirectJson, "SELECT '{}' AS braces"),
        (Gen, r#"{"Query":"SELECT 4"}"#, DirectJson, "SELECT 4"),
        (Gen, r#"{"query":"```sql\nSELECT 5\n```"}"#, DirectJson, "SELECT 5"),
        (Gen, r#"{"description":null,"query":"SELECT 6 -- <|-/|-/>"}"#, DirectJson, "SELECT 6 -- <|-/|-/>"),
        (Gen, r#"{"query":"SELECT 8"}<think>unfinished"#, DirectJson, "SELECT 8"),
        (Eval, r#"{"fixed_query":"SELECT 9","is_valid":true,"observation":"ok"}"#, DirectJson, "SELECT 9"),
        // embedded JSON
        (Gen, r#"Here you go: {"description":"d","query":"SELECT 1"} done"#, EmbeddedJson, "SELECT 1"),
        (Gen, "```json\n{\"query\":\"SELECT 2\"}\n```", EmbeddedJson, "SELECT 2"),
        (Gen, r#"prefix {"sql": "SELECT 3"}"#, EmbeddedJson, "SELECT 3"),
        (Gen, r#"x {"query": "SELECT '}' AS b"} y"#, EmbeddedJson, "SELECT '}' AS b"),
        (Gen, r#"x {"meta": {"n": 1}, "query": "SELECT 4"}"#, EmbeddedJson, "SELECT 4"),
        (Gen, r#"{"query":"SELECT 1"} and {"query":"SELECT 22222"}"#, EmbeddedJson, "SELECT 22222"),
        (Gen, r#"<think>{"query":"SELECT bad"}</think> answer {"query":"SELECT good"}"#, EmbeddedJson, "SELECT good"),
        (Gen, r#"Result: {"query": "```sql\nSELECT 5\n```"}"#, EmbeddedJson, "SELECT 5"),
        (Gen, r#"x {"query":"SELECT '<|-/|-/>' AS d"}"#, EmbeddedJson, "SELECT '<|-/|-/>' AS d"),
        (Eval, r#"Fixed: {"FixedQuery":"SELECT 6","isValid":"true"}."#, EmbeddedJson, "SELECT 6"),
        // fenced code block
        (Gen, "```sql\nSELECT 1\n```", CodeBlock, "SELECT 1"),
        (Gen, "Answer:\n```SQL\nSELECT a\nFROM b\n```\nthanks", CodeBlock, "SELECT a\nFROM b"),
        (
            Gen,
            "```postgresql\nWITH x AS (SELECT 1) SELECT * FROM x\n```",
            CodeBlock,
            "WITH x AS (SELECT 1) SELECT * FROM x",
        ),
        (Gen, "```\nSELECT 2\n```", CodeBlock, "SELECT 2"),
        (Gen, "```python\nprint(1)\n```\nthen\n```sql\nSELECT 3\n```", CodeBlock, "SELECT 3"),
        (Gen, "<think>```sql\nSELECT 0\n```</think>\n```sql\nSELECT 4\n```", CodeBlock, "SELECT 4"),
        (Gen, "```sql\nSELECT '{\"k\": 1}'::jsonb\n```", CodeBlock, "SELECT '{\"k\": 1}'::jsonb"),
        (Gen, "```sql\nSELECT '<|-/|-/>' AS d;\n```", CodeBlock, "SELECT '<|-/|-/>' AS d;"),
        (Gen, "```pgsql\nTABLE orders\n```", CodeBlock, "TABLE orders"),
        (Eval, "Fixed version:\n```sql\nSELECT fixed FROM t\n```", CodeBlock, "SELECT fixed FROM t"),
        // SELECT match
        (Gen, "Here is the query: SELECT a FROM t; Hope it helps", SelectRegex, "SELECT a FROM t"),
        (Gen, "Sure!\nWITH x AS (SELECT 1) SELECT * FROM x", SelectRegex, "WITH x AS (SELECT 1) SELECT * FROM x"),
        (Gen, "Try SELECT ';' AS semi FROM t; trailing", SelectRegex, "SELECT ';' AS semi FROM t"),
        (Gen, "```text\nSELECT name FROM users\n```", SelectRegex, "SELECT name FROM users"),
        (Gen, r#"{"query": "SELECT 1 FROM t"#, SelectRegex, "SELECT 1 FROM t"),
        (
            Gen,
            "with recursive r(n) as (select 1) select n from r",
            SelectRegex,
            "with recursive r(n) as (select 1) select n from r",
        ),
        (Gen, "<think>SELECT draft</think>The answer is select id from t;", SelectRegex, "select id from t"),
        (Gen, "Use {\"not\": \"json\" SELECT x FROM y", SelectRegex, "SELECT x FROM y"),
        (Gen, "SELECT '<|-/|-/>' FROM t;;", SelectRegex, "SELECT '<|-/|-/>' FROM t"),
        (Eval, "The fixed query is SELECT ok FROM t;", SelectRegex, "SELECT ok FROM t"),
        // raw text
        (Gen, "TABLE orders", RawText, "TABLE orders"),
        (Gen, "VALUES (1, 'a')", RawText, "VALUES (1, 'a')"),
        (Gen, "SHOW timezone", RawText, "SHOW timezone"),
        (Gen, "  table customers  ", RawText, "table customers"),
        (Gen, "<think>SELECT draft</think>TABLE orders", RawText, "TABLE orders"),
        (Gen, "DELETE FROM t", RawText, "DELETE FROM t"),
        (Gen, "```python\nTABLE x\n```", RawText, "TABLE x"),
        (Gen, "INSERT INTO t VALUES (1)", RawText, "INSERT INTO t VALUES (1)"),
        (Gen, "explain table t", RawText, "explain table t"),
        (Eval, "values (2)", RawText, "values (2)"),
    ]
}

const FUZZ_TOKENS: &[&str] = &[
    "{",
    "}",
    "\"",
    "\\",
    "'",
    ";",
    ":",
    ",",
    "\n",
    " ",
    "```",
    "```sql\n",
    "<think>",
    "</think>",
    "SELECT ",
    "WITH ",
    "x AS (",
    ")",
    "query",
    "\"query\":",
    "\"sql\":",
    "fixedQuery",
    DELIMITER,
    "TABLE ",
    "null",
    "true",
    "é",
    "😀",
];

fn c4_parser() -> Check {
    let corpus = parser_corpus();
    ensure_eq!(corpus.len(), 50, "corpus size");
    for strategy in ParseStrategy::CASCADE {
        let count = corpus.iter().filter(|(_, _, s, _)| *s == strategy).count();
        ensure_eq!(count, 10, format!("{strategy:?} cases"));
    }
    for (shape, input, strategy, query) in &corpus {
        let got = match shape {
            Shape::Gen => parse_generation(input).map(|(r, s)| (r.query, s)),
            Shape::Eval => parse_evaluation(input).map(|(r, s)| (r.fixed_query, s)),
        };
        ensure_eq!(got, Ok((query.to_string(), *strategy)), format!("input {input:?}"));
    }
    ensure!(parse_generation("I am not sure what you mean.").is_err(), "prose must not parse");
    ensure!(parse_generation("<think>SELECT 1").is_err(), "unclosed think hides everything");

    let mut rng = StdRng::seed_from_u64(0x5eed_0004);
    for i in 0..100_000 {
        let bytes: Vec<u8> = if i % 2 == 0 {
            (0..rng.gen_range(0..160)).map(|_| rng.gen()).collect()
        } else {
            (0..rng.gen_range(0..24)).flat_map(|_| FUZZ_TOKENS[rng.gen_range(0..FUZZ_TOKENS.len())].bytes()).collect()
        };
        let text = String::from_utf8_lossy(&bytes).into_owned();
        let outcome = catch_unwind(AssertUnwindSafe(|| {
            let g = parse_generation(&text).map(|(r, _)| r.query);
            let e = parse_evaluation(&text).map(|(r, _)| r.fixed_query);
            (g, e)
        }));
        let (g, e) = outcome.map_err(|_| format!("parser panicked on {text:?}"))?;
        for q in [g, e].into_iter().flatten() {
            ensure!(!q.trim().is_empty(), "empty query extracted from {text:?}");
        }
    }
    Ok(())
}

// ---- criterion 5 ----

fn ecommerce(pg: &testkit::PgServer, prefix: &str) -> sqlqe_core::db::ConnectionParams {
    let sql = std::fs::read_to_string(testkit::fixture_path("ecommerce.sql")).unwrap();
    pg.create_database(prefix, &sql)
}

fn checksum(pg: &testkit::PgServer, db: &str) -> String {
    let mut c = pg.admin(db).unwrap();
    let mut parts = Vec::new();
    for t in ["customers", "orders", "products", "reviews"] {
        let sql = format!("SELECT coalesce(md5(string_agg(t::text, ',' ORDER BY t::text)), '') FROM {t} t");
        parts.push(c.query_one(&sql, &[]).unwrap().get::<_, String>(0));
    }
    let sql = "SELECT string_agg(table_name::text, ',' ORDER BY table_name) FROM information_schema.tables WHERE table_schema = 'public'";
    parts.push(c.query_one(sql, &[]).unwrap().get(0));
    parts.join("|")
}

fn c5_read_only_gateway() -> Check {
    let pg = testkit::postgres().ok_or("PostgreSQL test server unavailable")?;
    let params = ecommerce(pg, "acc_ro");
    let before = checksum(pg, &params.dbname);
    let mut db = PgConnection::connect(&params).map_err(|e| e.to_string())?;
    let probe = |db: &mut PgConnection, sql: &str, expect_state: Option<&str>| -> Check {
        let exec = db.execute_readonly(sql, 10).map_err(|e| e.to_string())?;
        let err = exec.error().ok_or_else(|| format!("{sql} was not rejected"))?;
        let state = err.sqlstate.clone().ok_or_else(|| format!("{sql}: no SQLSTATE"))?;
        if let Some(want) = expect_state {
            ensure_eq!(state.as_str(), want, sql);
        }
        let ok = db.execute_readonly("SELECT 1", 10).map_err(|e| e.to_string())?;
        ensure_eq!(ok.rows().map(|r| r.rows.clone()), Some(vec![vec![Value::Int(1)]]), format!("SELECT 1 after {sql}"));
        Ok(())
    };
    let mutating = [
        "INSERT INTO customers (name, email, country, signup_date) VALUES ('x', 'x@x', 'X', '2024-01-01')",
        "UPDATE products SET price = 0",
        "DELETE FROM reviews",
        "DROP TABLE orders",
        "CREATE TABLE evil (id int)",
        "TRUNCATE orders",
        "ALTER TABLE customers ADD COLUMN hacked int",
    ];
    for sql in mutating {
        probe(&mut db, sql, Some("25006"))?;
    }
    probe(&mut db, "SELECT * FROM missing_table", Some("42P01"))?;
    probe(&mut db, "SELECT order_date_typo FROM orders", Some("42703"))?;
    probe(&mut db, "SELEC 1", Some("42601"))?;
    probe(&mut db, "SELECT 1/0", Some("22012"))?;
    ensure_eq!(checksum(pg, &params.dbname), before, "checksum after rejected writes");
    Ok(())
}

// ---- criterion 6 ----

fn adversarial_content(rng: &mut StdRng) -> String {
    const PIECES: &[&str] = &[
        "</",
        ">",
        ":",
        DELIMITER,
        "<|-/",
        "|-/>",
        "\n",
        "\r\n",
        "data: ",
        "[DONE]",
        "{\"a\":1}",
        "😀",
        "é",
        " ",
        "x",
    ];
    (0..rng.gen_range(0..20)).map(|_| PIECES[rng.gen_range(0..PIECES.len())]).collect()
}

fn sse_data(body: &str) -> Result<Vec<String>, String> {
    ensure!(body.ends_with("\n\n"), "frames must end with a blank line");
    body.split("\n\n")
        .filter(|f| !f.is_empty())
        .map(|f| f.strip_prefix("data: ").map(str::to_string).ok_or_else(|| format!("not a data frame: {f:?}")))
        .collect()
}

fn openai_schema(name: &str) -> jsonschema::Validator {
    let text = std::fs::read_to_string(testkit::fixture_path(&format!("openai/{name}.schema.json"))).unwrap();
    jsonschema::validator_for(&serde_json::from_str(&text).unwrap()).unwrap()
}

fn validate(v: &jsonschema::Validator, instance: &JsonValue, what: &str) -> Check {
    v.validate(instance).map_err(|e| format!("{what} violates schema: {e}: {instance}"))
}

const ORDERS: &str = "SELECT id, amount FROM orders";

fn wire_stack() -> ScriptedStack {
    let db = ScriptedDatabase::new().with_table("orders", &[("id", "integer"), ("amount", "numeric")]).respond(
        ORDERS,
        ScriptedResponse::rows(
            &["id", "amount"],
            vec![
                vec![Value::Int(1), Value::Decimal("10.50".into())],
                vec![Value::Int(2), Value::Decimal("20.00".into())],
            ],
        ),
    );
    let llm = ScriptedLlm::new([
        ScriptEntry::chunks(["The orders ", "table."]),
        ScriptEntry::text(json!({"description": "Counts orders.", "query": ORDERS}).to_string()),
    ]);
    ScriptedStack::new(db, llm)
}

fn wire_app(s: &ScriptedStack) -> Router {
    let config = Config::from_lookup(|_| None).unwrap();
    let mut state = AppState::new(s.engine.clone(), config);
    state.drain_idle = Duration::from_millis(50);
    router(state)
}

async fn call(app: &Router, method: &str, uri: &str, body: &str) -> (StatusCode, String) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, String::from_utf8(bytes.to_vec()).unwrap())
}

fn parse_json(s: &str) -> Result<JsonValue, String> {
    serde_json::from_str(s).map_err(|e| format!("{e}: {s}"))
}

async fn wire_checks() -> Check {
    let chat_schema = openai_schema("chat_completion");
    let chunk_schema = openai_schema("chat_completion_chunk");
    let text_schema = openai_schema("text_completion");
    let models_schema = openai_schema("models_list");

    let s = wire_stack();
    let (status, body) = call(&wire_app(&s), "GET", "/v1/models", "").await;
    ensure_eq!(status, StatusCode::OK, "models status");
    validate(&models_schema, &parse_json(&body)?, "models list")?;

    let s = wire_stack();
    let req = r#"{"model":"sql-query-engine","messages":[{"role":"user","content":"How many orders?"}]}"#;
    let (status, body) = call(&wire_app(&s), "POST", "/v1/chat/completions", req).await;
    ensure_eq!(status, StatusCode::OK, "chat completion status");
    validate(&chat_schema, &parse_json(&body)?, "chat completion")?;

    // streaming golden
    let s = wire_stack();
    let req = r#"{"model":"sql-query-engine","stream":true,"chat_id":"sse-acc","messages":[{"role":"user","content":"How many orders?"}]}"#;
    let (status, body) = call(&wire_app(&s), "POST", "/v1/chat/completions", req).await;
    ensure_eq!(status, StatusCode::OK, "stream status");
    let data = sse_data(&body)?;
    ensure_eq!(data.last().map(String::as_str), Some("[DONE]"), "stream terminator");
    let chunks: Vec<JsonValue> = data[..data.len() - 1].iter().map(|d| parse_json(d)).collect::<Result<_, _>>()?;
    for c in &chunks {
        validate(&chunk_schema, c, "chat chunk")?;
    }
    let contents: Vec<&str> = chunks.iter().filter_map(|c| c["choices"][0]["delta"]["content"].as_str()).collect();
    let golden = [
        "<think>\n",
        "The orders ",
        "table.",
        "\nCounts orders.\n\n```sql\nSELECT id, amount FROM orders\n```",
        "\nQuery:\n```sql\nSELECT id, amount FROM orders\n```\nObservation: initial generation\nResult: 2 row(s)\n",
        "Final query after 1 execution(s), accepted:\n```sql\nSELECT id, amount FROM orders\n```\nResult: 2 row(s)\n",
        "</think>\n\n",
        "```sql\nSELECT id, amount FROM orders\n```\n\n| id | amount |\n| --- | --- |\n| 1 | 10.50 |\n| 2 | 20.00 |\n",
    ];
    ensure_eq!(contents, golden.to_vec(), "stream contents");
    ensure_eq!(chunks[0]["choices"][0]["delta"]["role"].as_str(), Some("assistant"), "first chunk role");
    let last = chunks.last().unwrap();
    ensure_eq!(
        (last["choices"][0]["delta"].clone(), last["choices"][0]["finish_reason"].clone()),
        (json!({}), json!("stop")),
        "finish chunk"
    );
    let mirrored: Vec<String> = s.bus.published_on(&stream_channel("sse-acc")).into_iter().map(|r| r.payload).collect();
    ensure_eq!(mirrored, golden.to_vec(), "stream mirror");

    // legacy completions, both modes
    let s = wire_stack();
    let (status, body) = call(&wire_app(&s), "POST", "/v1/completions", r#"{"prompt":"How many orders?"}"#).await;
    ensure_eq!(status, StatusCode::OK, "completion status");
    validate(&text_schema, &parse_json(&body)?, "text completion")?;
    let s = wire_stack();
    let (_, body) =
        call(&wire_app(&s), "POST", "/v1/completions", r#"{"prompt":"How many orders?","stream":true}"#).await;
    let data = sse_data(&body)?;
    for d in &data[..data.len() - 1] {
        validate(&text_schema, &parse_json(d)?, "text completion chunk")?;
    }
    Ok(())
}

fn c6_wire_format() -> Check {
    let mut rng = StdRng::seed_from_u64(0x5eed_0006);
    for _ in 0..10_000 {
        let component = random_ident(&mut rng);
        let event = format!("{}#{}", random_ident(&mut rng), rng.gen_range(0..100));
        let e = ProgressEvent::new(component, event, adversarial_content(&mut rng));
        let wire = frame(&e).map_err(|err| err.to_string())?;
        let back = parse_frame(&wire).map_err(|err| err.to_string())?;
        ensure_eq!(back, e, "frame round trip");
    }
    ensure!(frame(&ProgressEvent::new("a:b", "c", "")).is_err(), "colon in component must be rejected");
    ensure!(frame(&ProgressEvent::new("a", "c>", "")).is_err(), "'>' in event must be rejected");

    runtime().block_on(wire_checks())?;

    let id = resolve_chat_id(&json!({"messages": [{"role": "user", "content": "hi"}]})).map_err(|e| e.to_string())?;
    ensure_eq!(id.as_str(), "49f68a5c8493ec2c0bf489821c21fc3b", "chat id of \"hi\"");
    if let Some(sys) = md5sum("hi") {
        ensure_eq!(id, sys, "chat id against md5sum");
    }
    Ok(())
}

fn md5sum(text: &str) -> Option<String> {
    use std::process::{Command, Stdio};
    let mut child = Command::new("md5sum").stdin(Stdio::piped()).stdout(Stdio::piped()).spawn().ok()?;
    child.stdin.take()?.write_all(text.as_bytes()).ok()?;
    let out = child.wait_with_output().ok()?;
    String::from_utf8(out.stdout).ok()?.split_whitespace().next().map(str::to_string)
}

// ---- criterion 7 ----

fn c7_migration() -> Check {
    let examples = [
        ("SELECT IFNULL(score, 0) FROM users", "SELECT COALESCE(score, 0) FROM users"),
        ("SELECT GROUP_CONCAT(name) FROM users", "SELECT STRING_AGG(name, ',') FROM users"),
        ("SELECT CAST(score AS REAL) FROM users", "SELECT CAST(score AS DOUBLE PRECISION) FROM users"),
        ("SELECT strftime('%Y', d) FROM t", "SELECT TO_CHAR(d, 'YYYY') FROM t"),
        ("CREATE TABLE t(id INTEGER PRIMARY KEY, n TEXT)", "CREATE TABLE t(id SERIAL PRIMARY KEY, n text)"),
        ("SELECT SUBSTR(name, 1, 3) FROM users", "SELECT SUBSTRING(name, 1, 3) FROM users"),
    ];
    let m = Migrator::new();
    for (input, want) in examples {
        let out = if input.starts_with("CREATE") { m.convert_ddl(input) } else { m.convert(input) }
            .map_err(|e| e.to_string())?;
        ensure_eq!(out.converted.as_deref(), Some(want), input);
    }
    for input in ["SELECT strftime('%Y', strftime('%Y-%m-%d', d)) FROM t", "SELECT JULIANDAY(a) - JULIANDAY(b) FROM t"]
    {
        let out = m.convert(input).map_err(|e| e.to_string())?;
        ensure!(
            matches!(out.verdict, Verdict::Unconvertible(_)) && out.converted.is_none(),
            "{input} should be unconvertible: {out:?}"
        );
    }

    let corpus = common::migrate_corpus();
    ensure!(corpus.len() >= 30, "corpus has only {} queries", corpus.len());
    let pg = testkit::postgres().ok_or("PostgreSQL test server unavailable")?;
    let schema = common::migrate_schema();
    let m = Migrator::with_hints(SchemaHints::from_ddl(&schema).map_err(|e| e.to_string())?);
    let mut ddl = m.convert_ddl(&schema).map_err(|e| e.to_string())?.converted.ok_or("schema not converted")?;
    ddl.push_str(&common::migrate_data());
    let params = pg.create_database("acc_migrate", &ddl);
    let mut db = PgConnection::connect(&params).map_err(|e| e.to_string())?;
    let lite = common::sqlite_fixture();
    let mut equal = 0;
    for sql in &corpus {
        let converted =
            m.convert(sql).map_err(|e| e.to_string())?.converted.ok_or_else(|| format!("not converted: {sql}"))?;
        let exec = db.execute_readonly(&converted, 10_000).map_err(|e| e.to_string())?;
        let got = exec.rows().ok_or_else(|| format!("{converted}: {:?}", exec.error()))?;
        if normalize(got) == normalize(&common::sqlite_query(&lite, sql)) {
            equal += 1;
        }
    }
    ensure_eq!(equal, corpus.len(), "queries with equal results");
    Ok(())
}

// ---- criterion 8 ----

fn bench(
    params: &sqlqe_core::db::ConnectionParams,
    playbook: &str,
    cfg: AblationConfig,
    qs: &[BenchmarkQuestion],
) -> BenchmarkReport {
    let pb = Playbook::load(&testkit::fixture_path(playbook)).unwrap();
    let params = params.clone();
    let (store, _) = SessionStore::in_memory();
    let env = BenchEnv::new(
        Arc::new(ScriptedLlm::routed(pb)),
        Box::new(move |_| Ok(Arc::new(PgConnector::new(params.clone())?) as Arc<dyn Connector>)),
        store,
        Arc::new(MemoryBus::new()),
    );
    run_benchmark(qs, cfg, &env)
}

fn ceil_percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = ((p / 100.0) * v.len() as f64).ceil() as usize;
    v[rank.clamp(1, v.len()) - 1]
}

fn round3(x: f64) -> i64 {
    (x * 1000.0).round() as i64
}

fn c8_harness() -> Check {
    let pg = testkit::postgres().ok_or("PostgreSQL test server unavailable")?;
    let params = ecommerce(pg, "acc_bench");
    let qs = load_questions(&testkit::fixture_path("questions.jsonl")).map_err(|e| e.to_string())?;

    let c = bench(&params, "playbook_fail_then_fix.json", AblationConfig::C, &qs);
    let a = bench(&params, "playbook_fail_then_fix.json", AblationConfig::A, &qs);
    ensure_eq!(c.accuracy, 0.0, "config C accuracy");
    ensure_eq!(a.accuracy, 100.0, "config A accuracy");
    ensure_eq!(compare(&c, &a).map_err(|e| e.to_string())?.regressions, 0, "regressions C to A");

    let stats = latency_stats(&a).map_err(|e| e.to_string())?;
    let lat: Vec<f64> = a.records.iter().map(|r| r.latency_s).collect();
    let avg = lat.iter().sum::<f64>() / lat.len() as f64;
    ensure_eq!(round3(stats.avg_s), round3(avg), "average latency");
    ensure_eq!(round3(stats.p90_s), round3(ceil_percentile(&lat, 90.0)), "p90 latency");
    ensure_eq!(round3(stats.p99_s), round3(ceil_percentile(&lat, 99.0)), "p99 latency");
    ensure_eq!(round3(stats.qpm), round3(60.0 / avg), "queries per minute");

    let c = bench(&params, "playbook_empty_first_result.json", AblationConfig::C, &qs);
    let a = bench(&params, "playbook_empty_first_result.json", AblationConfig::A, &qs);
    let regressions = compare(&c, &a).map_err(|e| e.to_string())?.regressions;
    ensure!(regressions > 0, "empty-first-result should regress, got {regressions}");
    Ok(())
}

// ---- criterion 9 ----

fn c9_context_cache() -> Check {
    let pg = testkit::postgres().ok_or("PostgreSQL test server unavailable")?;
    let params = ecommerce(pg, "acc_cache");
    let connector = CountingConnector::new(PgConnector::new(params).map_err(|e| e.to_string())?);
    let db = connector.counts();
    let llm = Arc::new(ScriptedLlm::new([
        ScriptEntry::text("Four tables: customers, products, orders, reviews."),
        ScriptEntry::text(gen_reply("SELECT count(*) FROM orders")),
        ScriptEntry::text(gen_reply("SELECT count(*) FROM customers")),
        ScriptEntry::text(repair_reply("SELECT count(*) FROM orders", true)),
    ]));
    let store_backend = Arc::new(sqlqe_core::session::MemoryHashStore::new());
    let store_ops = store_backend.counts();
    let backends = Backends {
        llm: llm.clone(),
        connector: Arc::new(connector),
        store: SessionStore::new(store_backend),
        bus: Arc::new(MemoryBus::new()),
    };
    let engine = Engine::with_backends(backends, EngineSettings::default());
    let opts = RunOptions::default();

    let cold = engine.generate("cache", "How many orders?", &opts).map_err(|e| e.to_string())?;
    ensure_eq!(cold.context.source, ContextSource::Scratch, "cold context source");
    ensure!(db.introspection() > 0, "cold build must introspect");
    ensure_eq!(llm.calls(), 2, "cold LLM calls");

    let (introspection, calls) = (db.introspection(), llm.calls());
    let warm = engine.generate("cache", "How many customers?", &opts).map_err(|e| e.to_string())?;
    ensure_eq!(warm.context.source, ContextSource::Cache, "warm context source");
    ensure_eq!(llm.calls() - calls, 1, "warm LLM calls");
    ensure_eq!(db.introspection() - introspection, 0, "warm introspection statements");

    let reads = store_ops.reads();
    let introspection = db.introspection();
    let out = engine
        .evaluate("fresh", "SELECT count(*) FROM orders", "How many orders?", Some(cold.context.clone()), &opts)
        .map_err(|e| e.to_string())?;
    ensure_eq!(out.context_source, ContextSource::Payload, "payload context source");
    ensure_eq!(store_ops.reads() - reads, 0, "store reads with payload");
    ensure_eq!(db.introspection() - introspection, 0, "introspection with payload");
    Ok(())
}

// ---- criterion 10 ----

/// Live backends from the environment: `LLM_BASE_URL`, `LLM_MODEL`,
/// `LLM_API_KEY`, `PG_HOST`/`PG_PORT`/`PG_DBNAME`/`PG_USER`/`PG_PASSWORD` and
/// `KV_HOST`/`KV_PORT`/`KV_PASSWORD`/`KV_DB`.
#[test]
#[ignore = "needs a live LLM, PostgreSQL and Redis"]
fn criterion_10_live_smoke() {
    let ok = run_criterion(10, "live end-to-end smoke run", || {
        let config = Config::from_env().map_err(|e| e.to_string())?;
        let engine =
            Engine::new(config.llm.clone(), config.db.clone(), config.kv.clone()).map_err(|e| e.to_string())?;
        let out = engine.run("live-smoke", "How many tables are there?").map_err(|e| e.to_string())?;
        ensure!(!out.generation.query.trim().is_empty(), "empty query generated");
        ensure!(out.evaluation.executions() >= 1, "query never executed");
        let mut db = PgConnection::connect(&config.db).map_err(|e| e.to_string())?;
        ensure!(db.execute_readonly("SELECT 1", 1).map_err(|e| e.to_string())?.rows().is_some(), "SELECT 1 failed");
        Ok(())
    });
    assert!(ok);
}
