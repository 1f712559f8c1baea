#![allow(clippy::ptr_arg)]

use serde::Serialize;

use super::tokenizer::{find_call, matching_paren, next_sig, prev_sig, render, split_args, tokenize, Token, TokenKind};
use super::{ConversionOutcome, MigrateError, SchemaHints, Verdict};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleScope {
    /// Applies to queries and DDL.
    Query,
    /// Applies only to `CREATE TABLE` conversion.
    Ddl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RuleInfo {
    pub name: &'static str,
    pub scope: RuleScope,
    pub summary: &'static str,
}

struct Ctx<'a> {
    hints: &'a SchemaHints,
    ddl: bool,
}

/// `Ok(true)` when the rule matched, `Err(reason)` for an unconvertible input.
type Apply = fn(&mut Vec<Token>, &Ctx) -> Result<bool, String>;

struct Rule {
    info: RuleInfo,
    apply: Apply,
}

const fn rule(name: &'static str, scope: RuleScope, summary: &'static str, apply: Apply) -> Rule {
    Rule { info: RuleInfo { name, scope, summary }, apply }
}

static RULES: [Rule; 16] = [
    rule(
        "integer_primary_key",
        RuleScope::Ddl,
        "INTEGER PRIMARY KEY [AUTOINCREMENT] becomes SERIAL PRIMARY KEY",
        integer_primary_key,
    ),
    rule(
        "affinity_types",
        RuleScope::Ddl,
        "column types map to PostgreSQL types (TEXT, REAL, BLOB to text, double precision, bytea)",
        affinity_types,
    ),
    rule(
        "double_quoted_literals",
        RuleScope::Query,
        "double-quoted strings that name no known identifier become single-quoted literals",
        double_quoted_literals,
    ),
    rule("backtick_identifiers", RuleScope::Query, "`name` and [name] become \"name\"", backtick_identifiers),
    rule("substr_to_substring", RuleScope::Query, "SUBSTR(s, i, n) becomes SUBSTRING(s, i, n)", substr_to_substring),
    rule("strftime_to_to_char", RuleScope::Query, "strftime(fmt, t) becomes TO_CHAR(t, pgfmt)", strftime_to_to_char),
    rule(
        "datetime_functions",
        RuleScope::Query,
        "DATETIME('now') becomes NOW(); DATE(x), DATETIME(x), TIME(x) become casts",
        datetime_functions,
    ),
    rule(
        "cast_types",
        RuleScope::Query,
        "CAST target types map to PostgreSQL types (REAL to DOUBLE PRECISION)",
        cast_types,
    ),
    rule(
        "group_concat_to_string_agg",
        RuleScope::Query,
        "GROUP_CONCAT(x[, sep]) becomes STRING_AGG(x, sep) with ',' as the default",
        group_concat,
    ),
    rule("ifnull_to_coalesce", RuleScope::Query, "IFNULL becomes COALESCE", ifnull_to_coalesce),
    rule(
        "round_numeric_cast",
        RuleScope::Query,
        "ROUND(x, n) becomes ROUND(CAST(x AS NUMERIC), n)",
        round_numeric_cast,
    ),
    rule(
        "boolean_literals",
        RuleScope::Query,
        "0 and 1 compared with boolean columns become FALSE and TRUE",
        boolean_literals,
    ),
    rule("limit_offset", RuleScope::Query, "LIMIT a, b becomes LIMIT b OFFSET a", limit_offset),
    rule("length_passthrough", RuleScope::Query, "LENGTH is kept unchanged", length_passthrough),
    rule("concat_passthrough", RuleScope::Query, "|| is kept unchanged", concat_passthrough),
    rule("random_passthrough", RuleScope::Query, "RANDOM() is kept unchanged", random_passthrough),
];

pub fn rule_catalog() -> Vec<RuleInfo> {
    RULES.iter().map(|r| r.info).collect()
}

pub(super) fn run(sql: &str, hints: &SchemaHints, ddl: bool) -> Result<ConversionOutcome, MigrateError> {
    let mut tokens = tokenize(sql)?;
    let mut applied = Vec::new();
    if let Some(reason) = blocked(&tokens) {
        return Ok(ConversionOutcome {
            converted: None,
            applied_rules: applied,
            verdict: Verdict::Unconvertible(reason),
        });
    }
    let ctx = Ctx { hints, ddl };
    for r in RULES.iter().filter(|r| ddl || r.info.scope == RuleScope::Query) {
        match (r.apply)(&mut tokens, &ctx) {
            Ok(true) => applied.push(r.info.name.to_string()),
            Ok(false) => {}
            Err(reason) => {
                return Ok(ConversionOutcome {
                    converted: None,
                    applied_rules: applied,
                    verdict: Verdict::Unconvertible(reason),
                })
            }
        }
    }
    Ok(ConversionOutcome { converted: Some(render(&tokens)), applied_rules: applied, verdict: Verdict::Converted })
}

fn blocked(tokens: &[Token]) -> Option<String> {
    if tokens.iter().any(|t| t.is_word("PRAGMA")) {
        return Some("PRAGMA statements have no PostgreSQL equivalent".into());
    }
    if find_call(tokens, 0, "JULIANDAY").is_some() {
        return Some("JULIANDAY arithmetic is not supported".into());
    }
    let mut from = 0;
    while let Some((name, open)) = find_call(tokens, from, "STRFTIME") {
        let close = matching_paren(tokens, open)?;
        if find_call(&tokens[..close], open, "STRFTIME").is_some() {
            return Some("nested strftime".into());
        }
        from = name + 1;
    }
    None
}

fn retokenize(text: &str) -> Vec<Token> {
    tokenize(text).expect("generated SQL tokenizes")
}

fn call_parts(tokens: &[Token], open: usize) -> Result<(usize, Vec<(usize, usize)>), String> {
    let close = matching_paren(tokens, open).ok_or("unbalanced parentheses")?;
    Ok((close, split_args(tokens, open, close)))
}

fn rename_calls(tokens: &mut [Token], from: &str, to: &str) -> bool {
    let mut changed = false;
    let mut at = 0;
    while let Some((name, _)) = find_call(tokens, at, from) {
        tokens[name] = Token::word(to);
        changed = true;
        at = name + 1;
    }
    changed
}

// ---------------------------------------------------------------- DDL

pub(super) struct ColumnDef {
    pub name: usize,
    /// Token range of the declared type, empty when none is declared.
    pub ty: (usize, usize),
    pub end: usize,
}

pub(super) struct TableDef {
    pub name: usize,
    pub columns: Vec<ColumnDef>,
}

const COLUMN_CONSTRAINTS: [&str; 12] = [
    "CONSTRAINT",
    "PRIMARY",
    "NOT",
    "NULL",
    "UNIQUE",
    "CHECK",
    "DEFAULT",
    "COLLATE",
    "REFERENCES",
    "GENERATED",
    "AS",
    "AUTOINCREMENT",
];
const TABLE_CONSTRAINTS: [&str; 5] = ["CONSTRAINT", "PRIMARY", "FOREIGN", "UNIQUE", "CHECK"];

pub(super) fn create_tables(tokens: &[Token]) -> Vec<TableDef> {
    let mut out = Vec::new();
    for i in 0..tokens.len() {
        if !tokens[i].is_word("CREATE") {
            continue;
        }
        let Some(mut j) = next_sig(tokens, i + 1) else { continue };
        if tokens[j].is_word("TEMP") || tokens[j].is_word("TEMPORARY") {
            let Some(k) = next_sig(tokens, j + 1) else { continue };
            j = k;
        }
        if !tokens[j].is_word("TABLE") {
            continue;
        }
        let Some(mut name) = next_sig(tokens, j + 1) else { continue };
        if tokens[name].is_word("IF") {
            let skip = (0..3).try_fold(name, |k, _| next_sig(tokens, k + 1));
            let Some(k) = skip else { continue };
            name = k;
        }
        let Some(mut open) = next_sig(tokens, name + 1) else { continue };
        if tokens[open].is_sym(".") {
            let Some(n) = next_sig(tokens, open + 1) else { continue };
            name = n;
            let Some(o) = next_sig(tokens, name + 1) else { continue };
            open = o;
        }
        if !tokens[open].is_sym("(") {
            continue;
        }
        let Some(close) = matching_paren(tokens, open) else { continue };
        let mut columns = Vec::new();
        for (s, e) in split_args(tokens, open, close) {
            if s >= e || TABLE_CONSTRAINTS.iter().any(|w| tokens[s].is_word(w)) {
                continue;
            }
            let ts = next_sig(tokens, s + 1).filter(|&k| k < e).unwrap_or(e);
            let mut te = ts;
            let mut k = ts;
            while k < e {
                let t = &tokens[k];
                if t.is_trivia() {
                    k += 1;
                } else if t.kind == TokenKind::Word && !COLUMN_CONSTRAINTS.iter().any(|w| t.is_word(w)) {
                    k += 1;
                    te = k;
                } else if t.is_sym("(") && te > ts {
                    k = matching_paren(tokens, k).map_or(e, |c| c + 1);
                    te = k;
                } else {
                    break;
                }
            }
            let ty = if te > ts { (ts, te) } else { (s + 1, s + 1) };
            columns.push(ColumnDef { name: s, ty, end: e });
        }
        out.push(TableDef { name, columns });
    }
    out
}

fn upper_norm(raw: &str) -> String {
    raw.split_whitespace().collect::<Vec<_>>().join(" ").to_uppercase()
}

/// PostgreSQL column type for a SQLite declared type, following SQLite's
/// affinity rules for names it does not know. `None` when no affinity rule
/// applies either.
pub(super) fn map_column_type(raw: &str) -> Option<String> {
    let norm = upper_norm(raw);
    let (base, params) = match norm.find('(') {
        Some(p) => (norm[..p].trim().to_string(), norm[p..].replace(' ', "")),
        None => (norm.clone(), String::new()),
    };
    let mapped = match base.as_str() {
        "SERIAL" | "BIGSERIAL" | "SMALLSERIAL" => return Some(raw.to_string()),
        "INTEGER" | "INT" | "INT4" | "MEDIUMINT" => "integer".to_string(),
        "BIGINT" | "INT8" | "UNSIGNED BIG INT" => "bigint".to_string(),
        "SMALLINT" | "INT2" | "TINYINT" => "smallint".to_string(),
        "TEXT" | "CLOB" => "text".to_string(),
        "VARCHAR" | "CHARACTER VARYING" | "NVARCHAR" | "VARYING CHARACTER" if !params.is_empty() => {
            format!("varchar{params}")
        }
        "CHAR" | "CHARACTER" | "NCHAR" | "NATIVE CHARACTER" if !params.is_empty() => format!("char{params}"),
        "VARCHAR" | "CHARACTER VARYING" | "NVARCHAR" | "VARYING CHARACTER" | "CHAR" | "CHARACTER" | "NCHAR"
        | "NATIVE CHARACTER" => "text".to_string(),
        "REAL" | "FLOAT" | "DOUBLE" | "DOUBLE PRECISION" | "FLOAT8" => "double precision".to_string(),
        "NUMERIC" | "DECIMAL" => format!("numeric{params}"),
        "BLOB" | "BYTEA" => "bytea".to_string(),
        "BOOLEAN" | "BOOL" => "boolean".to_string(),
        "DATE" => "date".to_string(),
        "DATETIME" | "TIMESTAMP" => "timestamp".to_string(),
        "TIME" => "time".to_string(),
        "JSON" | "JSONB" => "jsonb".to_string(),
        other if other.contains("INT") => "integer".to_string(),
        other if ["CHAR", "CLOB", "TEXT"].iter().any(|k| other.contains(k)) => "text".to_string(),
        other if other.contains("BLOB") => "bytea".to_string(),
        other if ["REAL", "FLOA", "DOUB"].iter().any(|k| other.contains(k)) => "double precision".to_string(),
        _ => return None,
    };
    Some(mapped)
}

fn integer_primary_key(tokens: &mut Vec<Token>, _: &Ctx) -> Result<bool, String> {
    let mut changed = false;
    let mut i = 0;
    while i < tokens.len() {
        if tokens[i].is_word("INTEGER") {
            let pk = next_sig(tokens, i + 1).filter(|&p| tokens[p].is_word("PRIMARY"));
            let key = pk.and_then(|p| next_sig(tokens, p + 1)).filter(|&k| tokens[k].is_word("KEY"));
            if let Some(k) = key {
                tokens[i] = Token::word("SERIAL");
                changed = true;
                let mut after = next_sig(tokens, k + 1);
                if let Some(a) = after.filter(|&a| tokens[a].is_word("ASC") || tokens[a].is_word("DESC")) {
                    after = next_sig(tokens, a + 1);
                }
                if let Some(a) = after.filter(|&a| tokens[a].is_word("AUTOINCREMENT")) {
                    let from = if a > 0 && tokens[a - 1].kind == TokenKind::Whitespace { a - 1 } else { a };
                    tokens.drain(from..=a);
                }
            }
        }
        i += 1;
    }
    Ok(changed)
}

fn affinity_types(tokens: &mut Vec<Token>, _: &Ctx) -> Result<bool, String> {
    let mut changed = false;
    let tables = create_tables(tokens);
    for table in tables.iter().rev() {
        for col in table.columns.iter().rev() {
            let (s, e) = col.ty;
            if s == e {
                tokens.splice(col.name + 1..col.name + 1, [Token::space(), Token::word("text")]);
                changed = true;
                continue;
            }
            let raw = render(&tokens[s..e]);
            let mapped = map_column_type(&raw).ok_or_else(|| format!("cannot map column type {raw}"))?;
            if mapped != raw {
                tokens.splice(s..e, retokenize(&mapped));
                changed = true;
            }
        }
    }
    Ok(changed)
}

// ---------------------------------------------------------------- quoting

fn double_quoted_literals(tokens: &mut Vec<Token>, ctx: &Ctx) -> Result<bool, String> {
    if ctx.ddl || ctx.hints.is_empty() {
        return Ok(false);
    }
    // `AS x`, and `t x` where `t` names a table or is itself quoted
    let alias_at = |i: usize| {
        prev_sig(tokens, i).is_some_and(|p| {
            let t = &tokens[p];
            t.is_word("AS")
                || matches!(t.kind, TokenKind::QuotedIdent | TokenKind::Backtick | TokenKind::Bracket)
                || (t.kind == TokenKind::Word && ctx.hints.identifiers.contains(&t.text.to_lowercase()))
        })
    };
    let aliases: Vec<String> = (0..tokens.len())
        .filter(|&i| alias_at(i))
        .filter_map(|i| tokens[i].ident_name())
        .map(|n| n.to_lowercase())
        .collect();
    let mut changed = false;
    for i in 0..tokens.len() {
        if tokens[i].kind != TokenKind::QuotedIdent {
            continue;
        }
        let name = tokens[i].unquoted();
        let lower = name.to_lowercase();
        let known = ctx.hints.identifiers.contains(&lower) || aliases.contains(&lower);
        let prev = prev_sig(tokens, i).map(|p| &tokens[p]);
        let next = next_sig(tokens, i + 1).map(|n| &tokens[n]);
        let ident_position =
            prev.is_some_and(|p| p.is_sym(".") || p.is_word("AS")) || next.is_some_and(|n| n.is_sym("."));
        if !known && !ident_position {
            tokens[i] = Token::string(&name);
            changed = true;
        }
    }
    Ok(changed)
}

fn backtick_identifiers(tokens: &mut Vec<Token>, _: &Ctx) -> Result<bool, String> {
    let mut changed = false;
    for t in tokens.iter_mut() {
        if matches!(t.kind, TokenKind::Backtick | TokenKind::Bracket) {
            *t = Token::quoted_ident(&t.unquoted());
            changed = true;
        }
    }
    Ok(changed)
}

// ---------------------------------------------------------------- functions

fn substr_to_substring(tokens: &mut Vec<Token>, _: &Ctx) -> Result<bool, String> {
    let mut at = 0;
    let mut changed = false;
    while let Some((name, open)) = find_call(tokens, at, "SUBSTR") {
        let (_, args) = call_parts(tokens, open)?;
        if args.get(1).is_some_and(|&(s, e)| s < e && tokens[s].is_sym("-")) {
            return Err("negative SUBSTR start positions are not supported".into());
        }
        tokens[name] = Token::word("SUBSTRING");
        changed = true;
        at = name + 1;
    }
    Ok(changed)
}

/// Maps a strftime format to a TO_CHAR pattern. Literal letters are
/// double-quoted so TO_CHAR does not read them as patterns.
pub(super) fn strftime_format(fmt: &str) -> Result<String, String> {
    let mut out = String::new();
    let mut letters = String::new();
    let flush = |out: &mut String, letters: &mut String| {
        if !letters.is_empty() {
            out.push('"');
            out.push_str(letters);
            out.push('"');
            letters.clear();
        }
    };
    let mut chars = fmt.chars();
    while let Some(c) = chars.next() {
        if c == '%' {
            flush(&mut out, &mut letters);
            let spec = chars.next().ok_or("strftime format ends with a lone %")?;
            out.push_str(match spec {
                'Y' => "YYYY",
                'm' => "MM",
                'd' => "DD",
                'H' => "HH24",
                'M' => "MI",
                'S' => "SS",
                'j' => "DDD",
                'f' => "SS.MS",
                '%' => "%",
                other => return Err(format!("unsupported strftime specifier %{other}")),
            });
        } else if c.is_alphabetic() {
            letters.push(c);
        } else if c == '"' {
            flush(&mut out, &mut letters);
            out.push_str("\\\"");
        } else {
            flush(&mut out, &mut letters);
            out.push(c);
        }
    }
    flush(&mut out, &mut letters);
    Ok(out)
}

/// Tokens for a time value argument: `'now'` becomes `NOW()`, other string
/// literals are cast to timestamp, expressions pass through.
fn time_value(arg: &[Token]) -> Vec<Token> {
    match arg {
        [t] if t.kind == TokenKind::String && t.unquoted().eq_ignore_ascii_case("now") => retokenize("NOW()"),
        [t] if t.kind == TokenKind::String => retokenize(&format!("CAST({} AS TIMESTAMP)", t.text)),
        _ => arg.to_vec(),
    }
}

fn strftime_to_to_char(tokens: &mut Vec<Token>, _: &Ctx) -> Result<bool, String> {
    let mut changed = false;
    while let Some((name, open)) = find_call(tokens, 0, "STRFTIME") {
        let (close, args) = call_parts(tokens, open)?;
        match args.len() {
            0 | 1 => return Err("strftime needs a format and a time value".into()),
            2 => {}
            _ => return Err("strftime modifiers are not supported".into()),
        }
        let (fs, fe) = args[0];
        if fe != fs + 1 || tokens[fs].kind != TokenKind::String {
            return Err("strftime format must be a string literal".into());
        }
        let pg = strftime_format(&tokens[fs].unquoted())?;
        let (ts, te) = args[1];
        let mut new = vec![Token::word("TO_CHAR"), Token::sym("(")];
        new.extend(time_value(&tokens[ts..te]));
        new.extend([Token::sym(","), Token::space(), Token::string(&pg), Token::sym(")")]);
        tokens.splice(name..=close, new);
        changed = true;
    }
    Ok(changed)
}

fn datetime_functions(tokens: &mut Vec<Token>, _: &Ctx) -> Result<bool, String> {
    let mut changed = false;
    for func in ["DATETIME", "DATE", "TIME"] {
        let mut at = 0;
        while let Some((name, open)) = find_call(tokens, at, func) {
            let (close, args) = call_parts(tokens, open)?;
            if args.len() > 1 {
                return Err(format!("{func} modifiers are not supported"));
            }
            let arg: Vec<Token> = args.first().map_or(Vec::new(), |&(s, e)| tokens[s..e].to_vec());
            let is_now = match arg.as_slice() {
                [] => true,
                [t] => t.kind == TokenKind::String && t.unquoted().eq_ignore_ascii_case("now"),
                _ => false,
            };
            let new = if is_now {
                retokenize(match func {
                    "DATETIME" => "NOW()",
                    "DATE" => "CURRENT_DATE",
                    _ => "CURRENT_TIME",
                })
            } else {
                let mut cast = vec![Token::word("CAST"), Token::sym("(")];
                cast.extend(arg);
                let target = if func == "DATE" { "DATE" } else { "TIMESTAMP" };
                cast.extend([Token::space(), Token::word("AS"), Token::space(), Token::word(target), Token::sym(")")]);
                match func {
                    "DATE" => cast,
                    _ => {
                        let fmt = if func == "DATETIME" { "YYYY-MM-DD HH24:MI:SS" } else { "HH24:MI:SS" };
                        let mut v = vec![Token::word("TO_CHAR"), Token::sym("(")];
                        v.extend(cast);
                        v.extend([Token::sym(","), Token::space(), Token::string(fmt), Token::sym(")")]);
                        v
                    }
                }
            };
            tokens.splice(name..=close, new);
            changed = true;
            at = name + 1;
        }
    }
    Ok(changed)
}

fn map_cast_type(raw: &str) -> Option<String> {
    map_column_type(raw).map(|t| t.to_uppercase())
}

fn cast_types(tokens: &mut Vec<Token>, _: &Ctx) -> Result<bool, String> {
    let mut changed = false;
    let mut at = 0;
    while let Some((name, open)) = find_call(tokens, at, "CAST") {
        let close = matching_paren(tokens, open).ok_or("unbalanced parentheses")?;
        let mut depth = 0usize;
        let mut as_at = None;
        for (k, t) in tokens.iter().enumerate().take(close).skip(open + 1) {
            if t.is_sym("(") {
                depth += 1;
            } else if t.is_sym(")") {
                depth = depth.saturating_sub(1);
            } else if depth == 0 && t.is_word("AS") {
                as_at = Some(k);
            }
        }
        let as_at = as_at.ok_or("CAST without AS")?;
        let s = next_sig(tokens, as_at + 1).filter(|&s| s < close).ok_or("CAST without a target type")?;
        let e = prev_sig(tokens, close).map_or(close, |p| p + 1);
        let raw = render(&tokens[s..e]);
        let mapped = map_cast_type(&raw).ok_or_else(|| format!("cannot map CAST target type {raw}"))?;
        if mapped != upper_norm(&raw) {
            tokens.splice(s..e, retokenize(&mapped));
            changed = true;
        }
        at = name + 1;
    }
    Ok(changed)
}

fn group_concat(tokens: &mut Vec<Token>, _: &Ctx) -> Result<bool, String> {
    let mut changed = false;
    while let Some((name, open)) = find_call(tokens, 0, "GROUP_CONCAT") {
        let (close, args) = call_parts(tokens, open)?;
        match args.len() {
            1 => {
                let end = args[0].1;
                tokens.splice(end..close, [Token::sym(","), Token::space(), Token::string(",")]);
            }
            2 => {}
            _ => return Err("GROUP_CONCAT takes one or two arguments".into()),
        }
        tokens[name] = Token::word("STRING_AGG");
        changed = true;
    }
    Ok(changed)
}

fn ifnull_to_coalesce(tokens: &mut Vec<Token>, _: &Ctx) -> Result<bool, String> {
    Ok(rename_calls(tokens, "IFNULL", "COALESCE"))
}

fn is_numeric_cast(tokens: &[Token], s: usize, e: usize) -> bool {
    if !tokens[s].is_word("CAST") {
        return false;
    }
    let Some(open) = next_sig(tokens, s + 1).filter(|&o| tokens[o].is_sym("(")) else { return false };
    let Some(close) = matching_paren(tokens, open) else { return false };
    let ty = prev_sig(tokens, close);
    close + 1 == e && ty.is_some_and(|t| tokens[t].is_word("NUMERIC"))
}

fn round_numeric_cast(tokens: &mut Vec<Token>, _: &Ctx) -> Result<bool, String> {
    let mut changed = false;
    let mut at = 0;
    while let Some((name, open)) = find_call(tokens, at, "ROUND") {
        let (_, args) = call_parts(tokens, open)?;
        if args.len() == 2 {
            let (s, e) = args[0];
            if s < e && !is_numeric_cast(tokens, s, e) {
                tokens.splice(
                    e..e,
                    [Token::space(), Token::word("AS"), Token::space(), Token::word("NUMERIC"), Token::sym(")")],
                );
                tokens.splice(s..s, [Token::word("CAST"), Token::sym("(")]);
                changed = true;
            }
        }
        at = name + 1;
    }
    Ok(changed)
}

/// For a reference starting at `i` such as `s.t.col`, the index of `col`.
fn last_qualified_part(tokens: &[Token], mut i: usize) -> usize {
    while let Some(dot) = next_sig(tokens, i + 1).filter(|&d| tokens[d].is_sym(".")) {
        match next_sig(tokens, dot + 1).filter(|&n| tokens[n].ident_name().is_some()) {
            Some(n) => i = n,
            None => break,
        }
    }
    i
}

const COMPARISONS: [&str; 4] = ["=", "==", "!=", "<>"];

fn boolean_literals(tokens: &mut Vec<Token>, ctx: &Ctx) -> Result<bool, String> {
    let bools = &ctx.hints.boolean_columns;
    if bools.is_empty() {
        return Ok(false);
    }
    let is_bool_ref = |t: &Token| t.ident_name().is_some_and(|n| bools.contains(&n.to_lowercase()));
    let literal = |t: &Token| if t.text == "1" { "TRUE" } else { "FALSE" };
    let mut targets = Vec::new();
    for i in 0..tokens.len() {
        let t = &tokens[i];
        if t.kind != TokenKind::Number || !(t.text == "0" || t.text == "1") {
            continue;
        }
        let before = prev_sig(tokens, i)
            .filter(|&p| COMPARISONS.iter().any(|c| tokens[p].is_sym(c)))
            .and_then(|p| prev_sig(tokens, p))
            .is_some_and(|q| is_bool_ref(&tokens[q]));
        let after = next_sig(tokens, i + 1)
            .filter(|&n| COMPARISONS.iter().any(|c| tokens[n].is_sym(c)))
            .and_then(|n| next_sig(tokens, n + 1))
            .map(|r| last_qualified_part(tokens, r))
            .is_some_and(|r| is_bool_ref(&tokens[r]));
        if before || after {
            targets.push(i);
        }
    }
    if ctx.ddl {
        for table in create_tables(tokens) {
            for col in &table.columns {
                let ty = render(&tokens[col.ty.0..col.ty.1]);
                if map_column_type(&ty).as_deref() != Some("boolean") {
                    continue;
                }
                for k in col.ty.1..col.end {
                    if !tokens[k].is_word("DEFAULT") {
                        continue;
                    }
                    let mut v = next_sig(tokens, k + 1);
                    if let Some(p) = v.filter(|&p| tokens[p].is_sym("(")) {
                        v = next_sig(tokens, p + 1);
                    }
                    if let Some(v) = v.filter(|&v| {
                        tokens[v].kind == TokenKind::Number && (tokens[v].text == "0" || tokens[v].text == "1")
                    }) {
                        targets.push(v);
                    }
                }
            }
        }
    }
    for &i in &targets {
        tokens[i] = Token::word(literal(&tokens[i]));
    }
    Ok(!targets.is_empty())
}

fn limit_offset(tokens: &mut Vec<Token>, _: &Ctx) -> Result<bool, String> {
    let mut changed = false;
    let value = |t: &Token| matches!(t.kind, TokenKind::Number | TokenKind::Param);
    for i in 0..tokens.len() {
        if !tokens[i].is_word("LIMIT") {
            continue;
        }
        let Some(a) = next_sig(tokens, i + 1).filter(|&a| value(&tokens[a])) else { continue };
        let Some(c) = next_sig(tokens, a + 1).filter(|&c| tokens[c].is_sym(",")) else { continue };
        let Some(b) = next_sig(tokens, c + 1).filter(|&b| value(&tokens[b])) else { continue };
        let (offset, count) = (tokens[a].clone(), tokens[b].clone());
        tokens.splice(a..=b, [count, Token::space(), Token::word("OFFSET"), Token::space(), offset]);
        changed = true;
    }
    Ok(changed)
}

fn length_passthrough(tokens: &mut Vec<Token>, _: &Ctx) -> Result<bool, String> {
    Ok(find_call(tokens, 0, "LENGTH").is_some())
}

fn concat_passthrough(tokens: &mut Vec<Token>, _: &Ctx) -> Result<bool, String> {
    Ok(tokens.iter().any(|t| t.is_sym("||")))
}

fn random_passthrough(tokens: &mut Vec<Token>, _: &Ctx) -> Result<bool, String> {
    Ok(find_call(tokens, 0, "RANDOM").is_some())
}
