use std::str::FromStr;

use rust_decimal::{Decimal, RoundingStrategy};
use serde::Serialize;

use crate::db::{QueryResult, Value};

/// Column permutations tried when several columns hold identical value
/// multisets. Beyond this the sorted column order is used as is.
const MAX_PERMUTATIONS: usize = 40_320;

/// A cell after normalization. Numbers of every source type share one
/// canonical decimal form so `3`, `3.0` and `3.001` compare equal.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(tag = "t", content = "v", rename_all = "snake_case")]
pub enum NormValue {
    Null,
    Bool(bool),
    Num(String),
    Text(String),
    Bytes(Vec<u8>),
}

impl NormValue {
    pub fn to_value(&self) -> Value {
        match self {
            NormValue::Null => Value::Null,
            NormValue::Bool(b) => Value::Bool(*b),
            NormValue::Num(n) => Value::Decimal(n.clone()),
            NormValue::Text(s) => Value::Text(s.clone()),
            NormValue::Bytes(b) => Value::Bytes(b.clone()),
        }
    }
}

/// Canonical multiset of rows with column order factored out.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NormalizedResult {
    pub width: usize,
    pub rows: Vec<Vec<NormValue>>,
}

impl NormalizedResult {
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Back to a [`QueryResult`] with placeholder column names.
    pub fn to_result(&self) -> QueryResult {
        QueryResult {
            columns: (0..self.width).map(|i| format!("c{i}")).collect(),
            rows: self.rows.iter().map(|r| r.iter().map(NormValue::to_value).collect()).collect(),
            truncated: false,
        }
    }
}

/// Half-even rounding to two decimal places, trailing zeros removed.
pub fn canonical_decimal(d: Decimal) -> String {
    let r = d.round_dp_with_strategy(2, RoundingStrategy::MidpointNearestEven).normalize();
    if r.is_zero() {
        "0".to_string()
    } else {
        r.to_string()
    }
}

fn number_from_text(text: &str) -> NormValue {
    let t = text.trim();
    let parsed = Decimal::from_str(t).or_else(|_| Decimal::from_scientific(t));
    match parsed {
        Ok(d) => NormValue::Num(canonical_decimal(d)),
        Err(_) => NormValue::Num(t.to_lowercase()),
    }
}

pub fn normalize_value(v: &Value) -> NormValue {
    match v {
        Value::Null => NormValue::Null,
        Value::Bool(b) => NormValue::Bool(*b),
        Value::Int(i) => NormValue::Num(canonical_decimal(Decimal::from(*i))),
        // Display gives the shortest round-tripping decimal, so 2.675 rounds
        // as written rather than as its binary approximation.
        Value::Float(f) if f.is_finite() => number_from_text(&f.to_string()),
        Value::Float(f) => NormValue::Num(f.to_string().to_lowercase()),
        Value::Decimal(d) => number_from_text(d),
        Value::Text(s) => NormValue::Text(s.trim().to_lowercase()),
        Value::Json(j) => NormValue::Text(j.to_string().trim().to_lowercase()),
        Value::Bytes(b) => NormValue::Bytes(b.clone()),
    }
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut items: Vec<usize> = (0..n).collect();
    fn go(k: usize, items: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k == items.len() {
            out.push(items.clone());
            return;
        }
        for i in k..items.len() {
            items.swap(k, i);
            go(k + 1, items, out);
            items.swap(k, i);
        }
    }
    go(0, &mut items, &mut out);
    out
}

fn project(rows: &[Vec<NormValue>], order: &[usize]) -> Vec<Vec<NormValue>> {
    let mut out: Vec<Vec<NormValue>> = rows.iter().map(|r| order.iter().map(|&c| r[c].clone()).collect()).collect();
    out.sort();
    out
}

/// Case-folds and trims text, rounds numbers half-even to two places, keeps
/// NULL distinct from every string, treats rows as a multiset and removes
/// column order.
pub fn normalize(r: &QueryResult) -> NormalizedResult {
    if r.rows.is_empty() {
        return NormalizedResult { width: 0, rows: Vec::new() };
    }
    let width = r.rows.iter().map(Vec::len).max().unwrap_or(0);
    let rows: Vec<Vec<NormValue>> = r
        .rows
        .iter()
        .map(|row| (0..width).map(|c| row.get(c).map_or(NormValue::Null, normalize_value)).collect())
        .collect();

    let signature = |c: usize| {
        let mut s: Vec<&NormValue> = rows.iter().map(|row| &row[c]).collect();
        s.sort();
        s
    };
    let sigs: Vec<Vec<&NormValue>> = (0..width).map(signature).collect();
    let mut order: Vec<usize> = (0..width).collect();
    order.sort_by(|&a, &b| sigs[a].cmp(&sigs[b]));

    // runs of columns with identical signatures can be permuted freely
    let mut groups: Vec<(usize, usize)> = Vec::new();
    let mut start = 0;
    for i in 1..=width {
        if i == width || sigs[order[i]] != sigs[order[start]] {
            if i - start > 1 {
                groups.push((start, i));
            }
            start = i;
        }
    }
    let combos = groups.iter().try_fold(1usize, |acc, (s, e)| (1..=(e - s)).try_fold(acc, |a, k| a.checked_mul(k)));
    let mut best = project(&rows, &order);
    if !groups.is_empty() && combos.is_some_and(|c| c <= MAX_PERMUTATIONS) {
        let perms: Vec<Vec<Vec<usize>>> = groups.iter().map(|(s, e)| permutations(e - s)).collect();
        let mut idx = vec![0usize; groups.len()];
        loop {
            let mut candidate = order.clone();
            for (g, (s, _)) in groups.iter().enumerate() {
                for (k, &p) in perms[g][idx[g]].iter().enumerate() {
                    candidate[s + k] = order[s + p];
                }
            }
            let projected = project(&rows, &candidate);
            if projected < best {
                best = projected;
            }
            // odometer over the permutation choices of each group
            let mut g = 0;
            while g < idx.len() {
                idx[g] += 1;
                if idx[g] < perms[g].len() {
                    break;
                }
                idx[g] = 0;
                g += 1;
            }
            if g == idx.len() {
                break;
            }
        }
    }
    NormalizedResult { width, rows: best }
}

/// Execution-accuracy match between an engine result and a gold result.
pub fn score(engine: &QueryResult, gold: &QueryResult) -> bool {
    normalize(engine) == normalize(gold)
}
