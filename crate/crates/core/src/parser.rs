//! Extraction of structured responses from free-form LLM output.
//!
//! Both response shapes go through the same cascade, tried in order:
//! direct JSON, embedded JSON, fenced code block, `SELECT`/`WITH` match and
//! raw text. `<think>` spans are removed first.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value as Json};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParseStrategy {
    DirectJson,
    EmbeddedJson,
    CodeBlock,
    SelectRegex,
    RawText,
}

impl ParseStrategy {
    pub const CASCADE: [ParseStrategy; 5] = [
        ParseStrategy::DirectJson,
        ParseStrategy::EmbeddedJson,
        ParseStrategy::CodeBlock,
        ParseStrategy::SelectRegex,
        ParseStrategy::RawText,
    ];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationResponse {
    pub description: String,
    pub query: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EvaluationResponse {
    /// Carried for completeness; never consulted for control flow.
    pub is_valid: bool,
    pub modified_user_prompt: String,
    pub observation: String,
    pub fixed_query: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("no SQL query could be extracted from the model output")]
pub struct ParseFailed {
    pub raw: String,
}

impl ParseFailed {
    /// First `max` characters of the offending text.
    pub fn excerpt(&self, max: usize) -> String {
        self.raw.chars().take(max).collect()
    }
}

fn think_closed() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?s)<think>.*?</think>").unwrap())
}

/// Removes `<think>...</think>` spans. An unclosed `<think>` removes
/// everything from the tag to the end of the text. Repeats until nothing
/// changes, so removal that splices a new tag together is also handled.
pub fn strip_think_tags(text: &str) -> String {
    let mut current = text.to_string();
    loop {
        let mut next = think_closed().replace_all(&current, "").into_owned();
        if next == current {
            if let Some(pos) = next.find("<think>") {
                next.truncate(pos);
            }
        }
        if next == current {
            return next;
        }
        current = next;
    }
}

/// Lowercases and drops `_`/`-` so `fixed_query`, `fixedQuery` and
/// `FixedQuery` compare equal.
fn canonical_key(k: &str) -> String {
    k.chars().filter(|c| *c != '_' && *c != '-').flat_map(char::to_lowercase).collect()
}

fn field<'a>(obj: &'a Map<String, Json>, aliases: &[&str]) -> Option<&'a Json> {
    for alias in aliases {
        if let Some(v) = obj.iter().find(|(k, _)| canonical_key(k) == *alias).map(|(_, v)| v) {
            return Some(v);
        }
    }
    None
}

fn string_field(obj: &Map<String, Json>, aliases: &[&str]) -> Option<String> {
    match field(obj, aliases)? {
        Json::String(s) => Some(s.clone()),
        Json::Null => None,
        other => Some(other.to_string()),
    }
}

fn bool_field(obj: &Map<String, Json>, aliases: &[&str]) -> bool {
    match field(obj, aliases) {
        Some(Json::Bool(b)) => *b,
        Some(Json::String(s)) => s.trim().eq_ignore_ascii_case("true"),
        _ => false,
    }
}

const QUERY_KEYS: &[&str] = &["query", "sql", "sqlquery"];
const FIXED_QUERY_KEYS: &[&str] = &["fixedquery", "fixedsql", "correctedquery", "query", "sql", "sqlquery"];

/// Strips surrounding code fences and whitespace; internal whitespace is
/// kept byte-for-byte.
fn clean_query(q: &str) -> String {
    let t = q.trim();
    if let Some(inner) = first_code_block(t, true) {
        return inner;
    }
    let t = t.trim_start_matches("```").trim_end_matches("```");
    t.trim().to_string()
}

/// Shape-specific field extraction shared by both cascades.
trait Target: Sized {
    fn from_object(obj: &Map<String, Json>) -> Option<Self>;
    fn from_sql(sql: String) -> Self;
}

impl Target for GenerationResponse {
    fn from_object(obj: &Map<String, Json>) -> Option<Self> {
        let query = clean_query(&string_field(obj, QUERY_KEYS)?);
        if query.is_empty() {
            return None;
        }
        let description = string_field(obj, &["description"]).unwrap_or_default();
        Some(Self { description, query })
    }

    fn from_sql(query: String) -> Self {
        Self { description: String::new(), query }
    }
}

impl Target for EvaluationResponse {
    fn from_object(obj: &Map<String, Json>) -> Option<Self> {
        let fixed_query = clean_query(&string_field(obj, FIXED_QUERY_KEYS)?);
        if fixed_query.is_empty() {
            return None;
        }
        Some(Self {
            is_valid: bool_field(obj, &["isvalid", "valid"]),
            modified_user_prompt: string_field(obj, &["modifieduserprompt", "modifiedprompt"]).unwrap_or_default(),
            observation: string_field(obj, &["observation", "observations"]).unwrap_or_default(),
            fixed_query,
        })
    }

    fn from_sql(fixed_query: String) -> Self {
        Self { is_valid: false, modified_user_prompt: String::new(), observation: String::new(), fixed_query }
    }
}

/// Balanced `{...}` spans, found by string-aware brace counting from every
/// opening brace.
fn balanced_spans(text: &str) -> Vec<(usize, usize)> {
    let bytes = text.as_bytes();
    let mut spans = Vec::new();
    for (start, &b) in bytes.iter().enumerate() {
        if b != b'{' {
            continue;
        }
        let mut depth = 0usize;
        let mut in_str = false;
        let mut escaped = false;
        for (i, &c) in bytes.iter().enumerate().skip(start) {
            if in_str {
                match c {
                    _ if escaped => escaped = false,
                    b'\\' => escaped = true,
                    b'"' => in_str = false,
                    _ => {}
                }
                continue;
            }
            match c {
                b'"' => in_str = true,
                b'{' => depth += 1,
                b'}' => {
                    depth -= 1;
                    if depth == 0 {
                        spans.push((start, i + 1));
                        break;
                    }
                }
                _ => {}
            }
        }
    }
    spans
}

fn embedded_json<T: Target>(text: &str) -> Option<T> {
    let mut spans = balanced_spans(text);
    // longest first; ties keep textual order
    spans.sort_by(|a, b| (b.1 - b.0).cmp(&(a.1 - a.0)).then(a.0.cmp(&b.0)));
    spans.into_iter().find_map(|(s, e)| match serde_json::from_str::<Json>(&text[s..e]) {
        Ok(Json::Object(obj)) => T::from_object(&obj),
        _ => None,
    })
}

const SQL_FENCE_TAGS: &[&str] = &["", "sql", "postgresql", "postgres", "pgsql", "psql", "plpgsql"];

/// Content of the first fenced block whose info string names SQL (or is
/// empty). With `any_tag`, the info string is not checked.
fn first_code_block(text: &str, any_tag: bool) -> Option<String> {
    let mut rest = text;
    let mut offset = 0;
    while let Some(open) = rest.find("```") {
        let after_open = &rest[open + 3..];
        let line_end = after_open.find('\n')?;
        let tag = after_open[..line_end].trim();
        let body = &after_open[line_end + 1..];
        let close = body.find("```")?;
        if any_tag || SQL_FENCE_TAGS.iter().any(|t| t.eq_ignore_ascii_case(tag)) {
            return Some(body[..close].trim().to_string());
        }
        let consumed = open + 3 + line_end + 1 + close + 3;
        offset += consumed;
        rest = &text[offset..];
    }
    None
}

fn code_block<T: Target>(text: &str) -> Option<T> {
    first_code_block(text, false).filter(|q| !q.is_empty()).map(T::from_sql)
}

fn sql_start() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    // WITH only counts when it opens a CTE: `WITH [RECURSIVE] name [(cols)] AS (`
    RE.get_or_init(|| {
        Regex::new(
            r#"(?i)\bSELECT\b|\bWITH\s+(?:RECURSIVE\s+)?(?:"[^"]+"|\w+)\s*(?:\([^)]*\)\s*)?AS\s*(?:NOT\s+)?(?:MATERIALIZED\s*)?\("#,
        )
        .unwrap()
    })
}

/// Finds the first standalone `SELECT` (or CTE-opening `WITH`) and takes the
/// text through the earliest of a semicolon outside quotes, a closing fence,
/// or the end of text.
pub(crate) fn select_match(text: &str) -> Option<String> {
    let m = sql_start().find(text)?;
    let tail = &text[m.start()..];
    let mut end = tail.len();
    let mut quote: Option<char> = None;
    for (i, c) in tail.char_indices() {
        match quote {
            Some(q) if c == q => quote = None,
            Some(_) => {}
            None => match c {
                '\'' | '"' => quote = Some(c),
                ';' => {
                    end = i;
                    break;
                }
                '`' if tail[i..].starts_with("```") => {
                    end = i;
                    break;
                }
                _ => {}
            },
        }
    }
    let q = tail[..end].trim();
    (!q.is_empty()).then(|| q.to_string())
}

fn select_regex<T: Target>(text: &str) -> Option<T> {
    select_match(text).map(T::from_sql)
}

const STATEMENT_KEYWORDS: &[&str] = &[
    "select", "with", "table", "values", "explain", "show", "insert", "update", "delete", "create", "drop", "alter",
    "truncate", "grant", "revoke", "merge", "copy", "call", "set",
];

/// The whole text, accepted only when it starts with a SQL statement
/// keyword. Prose therefore never passes as a query.
fn raw_text<T: Target>(text: &str) -> Option<T> {
    let q = clean_query(text);
    let first = q.split(|c: char| !c.is_ascii_alphabetic()).next().unwrap_or("").to_ascii_lowercase();
    STATEMENT_KEYWORDS.contains(&first.as_str()).then(|| T::from_sql(q))
}

fn direct_json<T: Target>(text: &str) -> Option<T> {
    match serde_json::from_str::<Json>(text) {
        Ok(Json::Object(obj)) => T::from_object(&obj),
        _ => None,
    }
}

fn cascade<T: Target>(text: &str) -> Result<(T, ParseStrategy), ParseFailed> {
    let stripped = strip_think_tags(text);
    let t = stripped.trim();
    for strategy in ParseStrategy::CASCADE {
        let hit = match strategy {
            ParseStrategy::DirectJson => direct_json(t),
            ParseStrategy::EmbeddedJson => embedded_json(t),
            ParseStrategy::CodeBlock => code_block(t),
            ParseStrategy::SelectRegex => select_regex(t),
            ParseStrategy::RawText => raw_text(t),
        };
        if let Some(v) = hit {
            return Ok((v, strategy));
        }
    }
    Err(ParseFailed { raw: text.to_string() })
}

/// Extracts a `{description, query}` response. `sql` and other spellings of
/// `query` are accepted.
pub fn parse_generation(text: &str) -> Result<(GenerationResponse, ParseStrategy), ParseFailed> {
    cascade(text)
}

/// Extracts an evaluator response. snake_case and camelCase spellings of
/// every field are accepted; missing text fields default to `""` and a
/// missing `isValid` to false.
pub fn parse_evaluation(text: &str) -> Result<(EvaluationResponse, ParseStrategy), ParseFailed> {
    cascade(text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn think_tags() {
        assert_eq!(strip_think_tags("<think>plan</think>{\"query\":\"SELECT 1\"}"), "{\"query\":\"SELECT 1\"}");
        assert_eq!(strip_think_tags("a<think>x\ny</think>b<think>z</think>c"), "abc");
        assert_eq!(strip_think_tags("plain text"), "plain text");
        assert_eq!(strip_think_tags("keep<think>never closed"), "keep");
        assert_eq!(strip_think_tags("<thi<think>x</think>nk>y</think>z"), "z");
    }

    #[test]
    fn generation_examples() {
        let (r, s) = parse_generation(r#"{"description":"count","query":"SELECT count(*) FROM t"}"#).unwrap();
        assert_eq!(
            (s, r.query.as_str(), r.description.as_str()),
            (ParseStrategy::DirectJson, "SELECT count(*) FROM t", "count")
        );

        let (r, s) = parse_generation(r#"Here you go: {"sql":"SELECT 1"} enjoy"#).unwrap();
        assert_eq!((s, r.query.as_str()), (ParseStrategy::EmbeddedJson, "SELECT 1"));

        let (r, s) = parse_generation("```sql\nSELECT a FROM b\n```").unwrap();
        assert_eq!((s, r.query.as_str()), (ParseStrategy::CodeBlock, "SELECT a FROM b"));

        let (r, s) = parse_generation("The answer is SELECT id FROM users WHERE id=1;").unwrap();
        assert_eq!((s, r.query.as_str()), (ParseStrategy::SelectRegex, "SELECT id FROM users WHERE id=1"));

        let (r, _) = parse_generation("SELECT 1").unwrap();
        assert_eq!(r.query, "SELECT 1");
        assert_eq!(r.description, "");
    }

    #[test]
    fn prose_without_sql_fails() {
        let err = parse_generation("I am not sure how to answer that question.").unwrap_err();
        assert!(err.raw.contains("not sure"));
        assert!(parse_generation("").is_err());
        assert!(parse_generation("<think>SELECT 1</think>").is_err());
    }

    #[test]
    fn evaluation_examples() {
        let (r, s) = parse_evaluation(
            r#"{"isValid": false, "fixedQuery":"SELECT 1","observation":"o","modifiedUserPrompt":"p"}"#,
        )
        .unwrap();
        assert_eq!(s, ParseStrategy::DirectJson);
        assert_eq!(
            r,
            EvaluationResponse {
                is_valid: false,
                modified_user_prompt: "p".into(),
                observation: "o".into(),
                fixed_query: "SELECT 1".into()
            }
        );

        let (r, _) = parse_evaluation(r#"{"is_valid": true, "fixed_query":"SELECT 2"}"#).unwrap();
        assert_eq!(r.fixed_query, "SELECT 2");
        assert!(r.is_valid);
        assert_eq!(r.observation, "");

        // Cascade by hand: not JSON, no braces, first fence tagged sql.
        let (r, s) = parse_evaluation("The column was wrong.\n```sql\nSELECT name FROM c\n```\n").unwrap();
        assert_eq!(s, ParseStrategy::CodeBlock);
        assert_eq!(r.fixed_query, "SELECT name FROM c");
        assert!(!r.is_valid);
        assert_eq!(r.modified_user_prompt, "");
    }

    #[test]
    fn fenced_json_value_is_cleaned() {
        let (r, _) = parse_generation(r#"{"query":"```sql\nSELECT 3\n```"}"#).unwrap();
        assert_eq!(r.query, "SELECT 3");
    }

    #[test]
    fn with_needs_cte_shape() {
        assert_eq!(
            select_match("Use this: WITH t AS (SELECT 1 AS x) SELECT x FROM t; done").as_deref(),
            Some("WITH t AS (SELECT 1 AS x) SELECT x FROM t")
        );
        assert_eq!(select_match("Try a query with a join: SELECT a FROM b").as_deref(), Some("SELECT a FROM b"));
        assert_eq!(select_match("selection of items"), None);
    }

    #[test]
    fn semicolon_inside_literal_does_not_terminate() {
        assert_eq!(select_match("ok SELECT 'a;b' AS x; trailing").as_deref(), Some("SELECT 'a;b' AS x"));
    }

    #[test]
    fn non_sql_fence_is_skipped() {
        let text = "```python\nprint(1)\n```\nthen\n```sql\nSELECT 9\n```";
        let (r, s) = parse_generation(text).unwrap();
        assert_eq!((s, r.query.as_str()), (ParseStrategy::CodeBlock, "SELECT 9"));
    }

    #[test]
    fn embedded_prefers_longest_span_with_query() {
        let text = r#"meta {"a":1} then {"description":"d","query":"SELECT 5","extra":{"n":2}}"#;
        let (r, s) = parse_generation(text).unwrap();
        assert_eq!((s, r.query.as_str()), (ParseStrategy::EmbeddedJson, "SELECT 5"));
    }

    proptest! {
        #[test]
        fn never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
            let s = String::from_utf8_lossy(&bytes);
            let _ = parse_generation(&s);
            let _ = parse_evaluation(&s);
        }

        #[test]
        fn strip_is_idempotent(s in "(<think>|</think>|<thi|nk>|[a-z ]){0,24}") {
            let once = strip_think_tags(&s);
            prop_assert_eq!(strip_think_tags(&once), once);
        }

        #[test]
        fn parse_ignores_prior_stripping(s in "(<think>|</think>|SELECT 1|\\{\"sql\":\"SELECT 2\"\\}|[a-z ;]){0,16}") {
            prop_assert_eq!(parse_generation(&strip_think_tags(&s)).ok(), parse_generation(&s).ok());
        }

        #[test]
        fn canonical_json_round_trips(
            description in "[ -~]{0,40}",
            query in "SELECT [a-z_]{1,10}( FROM [a-z]{1,8})?( WHERE [a-z]{1,5} = '[ -&(-~]{0,10}')?",
        ) {
            let resp = GenerationResponse { description, query };
            let json = serde_json::to_string(&resp).unwrap();
            let (back, strategy) = parse_generation(&json).unwrap();
            prop_assert_eq!(strategy, ParseStrategy::DirectJson);
            prop_assert_eq!(back, resp);
        }
    }
}
