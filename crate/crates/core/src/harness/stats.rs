use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::{accuracy, BenchmarkReport, Difficulty, HarnessError, TierStats};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub avg_s: f64,
    pub p90_s: f64,
    pub p99_s: f64,
    /// Questions per minute: 60 · count / total latency.
    pub qpm: f64,
}

/// Nearest-rank percentile of an ascending slice: the value at rank
/// ⌈p/100 · n⌉.
pub fn nearest_rank(sorted: &[f64], p: u32) -> f64 {
    assert!(!sorted.is_empty() && (1..=100).contains(&p));
    let rank = (p as usize * sorted.len()).div_ceil(100).max(1);
    sorted[rank - 1]
}

pub fn latency_stats(report: &BenchmarkReport) -> Result<LatencyStats, HarnessError> {
    if report.records.is_empty() {
        return Err(HarnessError::EmptyReport);
    }
    let mut lat: Vec<f64> = report.records.iter().map(|r| r.latency_s).collect();
    lat.sort_by(f64::total_cmp);
    let sum: f64 = lat.iter().sum();
    let n = lat.len() as f64;
    Ok(LatencyStats {
        avg_s: sum / n,
        p90_s: nearest_rank(&lat, 90),
        p99_s: nearest_rank(&lat, 99),
        qpm: 60.0 * n / sum,
    })
}

pub(super) fn tier_stats(report: &BenchmarkReport) -> BTreeMap<Difficulty, TierStats> {
    let mut tiers: BTreeMap<Difficulty, (usize, usize)> = BTreeMap::new();
    for r in &report.records {
        let e = tiers.entry(r.difficulty).or_default();
        e.0 += 1;
        e.1 += usize::from(r.correct);
    }
    tiers
        .into_iter()
        .map(|(d, (total, correct))| (d, TierStats { total, correct, accuracy: accuracy(correct, total) }))
        .collect()
}

/// Accuracy per difficulty tier; tiers without questions are absent.
pub fn tier_breakdown(report: &BenchmarkReport) -> BTreeMap<Difficulty, f64> {
    tier_stats(report).into_iter().map(|(d, s)| (d, s.accuracy)).collect()
}

fn outcomes(report: &BenchmarkReport) -> BTreeMap<&str, bool> {
    report.records.iter().map(|r| (r.id.as_str(), r.correct)).collect()
}

fn check_same_questions(a: &BenchmarkReport, b: &BenchmarkReport) -> Result<(), HarnessError> {
    let ids_a: BTreeSet<&str> = a.records.iter().map(|r| r.id.as_str()).collect();
    let ids_b: BTreeSet<&str> = b.records.iter().map(|r| r.id.as_str()).collect();
    if ids_a != ids_b || ids_a.len() != a.records.len() || ids_b.len() != b.records.len() {
        let only_a: Vec<&str> = ids_a.difference(&ids_b).copied().collect();
        let only_b: Vec<&str> = ids_b.difference(&ids_a).copied().collect();
        return Err(HarnessError::MismatchedQuestionSets(format!(
            "only in baseline: {only_a:?}; only in candidate: {only_b:?}"
        )));
    }
    Ok(())
}

/// Questions correct in `baseline` but incorrect in `candidate`.
pub fn count_regressions(baseline: &BenchmarkReport, candidate: &BenchmarkReport) -> Result<usize, HarnessError> {
    Ok(compare(baseline, candidate)?.regressions)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline_config: String,
    pub candidate_config: String,
    pub baseline_accuracy: f64,
    pub candidate_accuracy: f64,
    pub delta_pp: f64,
    pub regressions: usize,
    pub improvements: usize,
    pub regressed: Vec<String>,
    pub improved: Vec<String>,
}

pub fn compare(baseline: &BenchmarkReport, candidate: &BenchmarkReport) -> Result<Comparison, HarnessError> {
    check_same_questions(baseline, candidate)?;
    let (b, c) = (outcomes(baseline), outcomes(candidate));
    let regressed: Vec<String> = b.iter().filter(|(id, &ok)| ok && !c[*id]).map(|(id, _)| id.to_string()).collect();
    let improved: Vec<String> = b.iter().filter(|(id, &ok)| !ok && c[*id]).map(|(id, _)| id.to_string()).collect();
    Ok(Comparison {
        baseline_config: baseline.config.label().to_string(),
        candidate_config: candidate.config.label().to_string(),
        baseline_accuracy: baseline.accuracy,
        candidate_accuracy: candidate.accuracy,
        delta_pp: candidate.accuracy - baseline.accuracy,
        regressions: regressed.len(),
        improvements: improved.len(),
        regressed,
        improved,
    })
}

/// Plain-text per-question table followed by the aggregates.
pub fn render_table(report: &BenchmarkReport) -> String {
    let mut out = String::new();
    let _ =
        writeln!(out, "Config {} (retry_count={}) on {}", report.config.label(), report.retry_count, report.backend);
    let _ = writeln!(
        out,
        "{:<12} {:<12} {:<8} {:>10} {:>6} {:>8} {:>7}",
        "id", "tier", "correct", "latency_s", "iters", "repairs", "early"
    );
    for r in &report.records {
        let mark = match (r.correct, r.empty_match) {
            (true, true) => "yes*",
            (true, false) => "yes",
            _ => "no",
        };
        let _ = writeln!(
            out,
            "{:<12} {:<12} {:<8} {:>10.3} {:>6} {:>8} {:>7}",
            r.id,
            r.difficulty.to_string(),
            mark,
            r.latency_s,
            r.iterations_used,
            r.repair_calls,
            if r.early_accepted { "yes" } else { "no" }
        );
    }
    let _ = writeln!(out, "accuracy: {:.1}% ({}/{})", report.accuracy, report.correct, report.total);
    if report.empty_matches > 0 {
        let _ = writeln!(out, "empty-vs-empty matches (marked *): {}", report.empty_matches);
    }
    for (tier, s) in &report.tiers {
        let _ = writeln!(out, "  {tier}: {:.1}% ({}/{})", s.accuracy, s.correct, s.total);
    }
    if let Some(l) = &report.latency {
        let _ = writeln!(
            out,
            "latency: avg {:.3}s, p90 {:.3}s, p99 {:.3}s, {:.1} questions/min",
            l.avg_s, l.p90_s, l.p99_s, l.qpm
        );
    }
    out
}

pub fn render_comparison(c: &Comparison) -> String {
    let mut out = format!(
        "baseline {}: {:.1}%\ncandidate {}: {:.1}%\ndelta: {:+.1} pp\nregressions: {}\nimprovements: {}\n",
        c.baseline_config,
        c.baseline_accuracy,
        c.candidate_config,
        c.candidate_accuracy,
        c.delta_pp,
        c.regressions,
        c.improvements
    );
    if !c.regressed.is_empty() {
        out.push_str(&format!("regressed: {}\n", c.regressed.join(", ")));
    }
    out
}
