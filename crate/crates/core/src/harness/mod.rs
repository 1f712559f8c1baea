//! Execution-accuracy benchmark: ablation configs, gold comparison,
//! regression counting, difficulty breakdown and latency statistics.

mod normalize;
mod stats;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::db::{Connector, DbError, Execution, QueryResult};
use crate::engine::{Backends, Engine, EngineSettings, RunOptions};
use crate::events::EventBus;
use crate::llm::ChatBackend;
use crate::session::SessionStore;

pub use self::normalize::{canonical_decimal, normalize, normalize_value, score, NormValue, NormalizedResult};
pub use self::stats::{
    compare, count_regressions, latency_stats, nearest_rank, render_comparison, render_table, tier_breakdown,
    Comparison, LatencyStats,
};

pub const DEFAULT_HARNESS_ROW_LIMIT: usize = 10_000;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("cannot read {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("invalid question file at line {line}: {reason}")]
    InvalidQuestions { line: usize, reason: String },
    #[error("invalid report: {0}")]
    InvalidReport(String),
    #[error("reports cover different question sets: {0}")]
    MismatchedQuestionSets(String),
    #[error("report has no records")]
    EmptyReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
    ExtraHard,
    Simple,
    Moderate,
    Challenging,
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Difficulty::Easy => "easy",
            Difficulty::Medium => "medium",
            Difficulty::Hard => "hard",
            Difficulty::ExtraHard => "extra_hard",
            Difficulty::Simple => "simple",
            Difficulty::Moderate => "moderate",
            Difficulty::Challenging => "challenging",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkQuestion {
    pub id: String,
    pub database: String,
    pub question: String,
    pub gold_sql: String,
    pub difficulty: Difficulty,
    /// Kept for reference; never shown to the engine.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evidence: Option<String>,
}

/// Reads a JSON Lines question file. Blank lines are skipped; ids must be
/// unique.
pub fn load_questions(path: &Path) -> Result<Vec<BenchmarkQuestion>, HarnessError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| HarnessError::Io { path: path.display().to_string(), reason: e.to_string() })?;
    parse_questions(&text)
}

pub fn parse_questions(text: &str) -> Result<Vec<BenchmarkQuestion>, HarnessError> {
    let mut out: Vec<BenchmarkQuestion> = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let q: BenchmarkQuestion = serde_json::from_str(line)
            .map_err(|e| HarnessError::InvalidQuestions { line: i + 1, reason: e.to_string() })?;
        if q.question.trim().is_empty() || q.gold_sql.trim().is_empty() {
            return Err(HarnessError::InvalidQuestions {
                line: i + 1,
                reason: "question and gold_sql must be non-empty".into(),
            });
        }
        if !seen.insert(q.id.clone()) {
            return Err(HarnessError::InvalidQuestions { line: i + 1, reason: format!("duplicate id {}", q.id) });
        }
        out.push(q);
    }
    Ok(out)
}

/// Retry budgets isolating each pipeline stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AblationConfig {
    A,
    B,
    C,
}

impl AblationConfig {
    pub fn retry_count(self) -> usize {
        match self {
            AblationConfig::A => 5,
            AblationConfig::B => 1,
            AblationConfig::C => 0,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            AblationConfig::A => "A",
            AblationConfig::B => "B",
            AblationConfig::C => "C",
        }
    }
}

impl FromStr for AblationConfig {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" => Ok(AblationConfig::A),
            "B" => Ok(AblationConfig::B),
            "C" => Ok(AblationConfig::C),
            other => Err(format!("unknown config {other:?}; expected A, B or C")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub id: String,
    pub difficulty: Difficulty,
    pub correct: bool,
    /// Correct only because both results were empty.
    pub empty_match: bool,
    pub latency_s: f64,
    pub iterations_used: usize,
    pub early_accepted: bool,
    pub repair_calls: usize,
    pub engine_query: Option<String>,
    pub engine_rows: Option<usize>,
    pub gold_rows: Option<usize>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierStats {
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub config: AblationConfig,
    pub retry_count: usize,
    pub backend: String,
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub empty_matches: usize,
    pub tiers: BTreeMap<Difficulty, TierStats>,
    pub latency: Option<LatencyStats>,
    pub records: Vec<QuestionRecord>,
}

impl BenchmarkReport {
    /// Aggregates computed from `records`.
    pub fn from_records(config: AblationConfig, backend: &str, records: Vec<QuestionRecord>) -> Self {
        let total = records.len();
        let correct = records.iter().filter(|r| r.correct).count();
        let mut report = BenchmarkReport {
            config,
            retry_count: config.retry_count(),
            backend: backend.to_string(),
            total,
            correct,
            accuracy: accuracy(correct, total),
            empty_matches: records.iter().filter(|r| r.empty_match).count(),
            tiers: BTreeMap::new(),
            latency: None,
            records,
        };
        report.tiers = stats::tier_stats(&report);
        report.latency = latency_stats(&report).ok();
        report
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Io { path: path.display().to_string(), reason: e.to_string() })?;
        serde_json::from_str(&text).map_err(|e| HarnessError::InvalidReport(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        let json = serde_json::to_string_pretty(self).map_err(|e| HarnessError::InvalidReport(e.to_string()))?;
        std::fs::write(path, json + "\n")
            .map_err(|e| HarnessError::Io { path: path.display().to_string(), reason: e.to_string() })
    }
}

pub fn accuracy(correct: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * correct as f64 / total as f64
    }
}

pub type ConnectorFactory = dyn Fn(&str) -> Result<Arc<dyn Connector>, DbError> + Send + Sync;

/// Everything a benchmark run needs besides the questions.
pub struct BenchEnv {
    pub llm: Arc<dyn ChatBackend>,
    /// Opens connectors by question database name.
    pub connectors: Box<ConnectorFactory>,
    pub store: SessionStore,
    pub bus: Arc<dyn EventBus>,
    pub settings: EngineSettings,
    pub row_limit: usize,
    pub backend_label: String,
    /// Questions run concurrently when above 1; latencies then include
    /// contention.
    pub parallelism: usize,
}

impl BenchEnv {
    pub fn new(
        llm: Arc<dyn ChatBackend>,
        connectors: Box<ConnectorFactory>,
        store: SessionStore,
        bus: Arc<dyn EventBus>,
    ) -> Self {
        Self {
            llm,
            connectors,
            store,
            bus,
            settings: EngineSettings::default(),
            row_limit: DEFAULT_HARNESS_ROW_LIMIT,
            backend_label: "custom".into(),
            parallelism: 1,
        }
    }
}

struct Runner<'a> {
    env: &'a BenchEnv,
    cfg: AblationConfig,
    engines: Mutex<HashMap<String, Engine>>,
}

impl Runner<'_> {
    fn engine(&self, database: &str) -> Result<Engine, DbError> {
        let mut engines = self.engines.lock().unwrap();
        if let Some(e) = engines.get(database) {
            return Ok(e.clone());
        }
        let backends = Backends {
            llm: self.env.llm.clone(),
            connector: (self.env.connectors)(database)?,
            store: self.env.store.clone(),
            bus: self.env.bus.clone(),
        };
        let engine = Engine::with_backends(backends, self.env.settings.clone());
        engines.insert(database.to_string(), engine.clone());
        Ok(engine)
    }

    fn run_one(&self, q: &BenchmarkQuestion) -> QuestionRecord {
        let mut rec = QuestionRecord {
            id: q.id.clone(),
            difficulty: q.difficulty,
            correct: false,
            empty_match: false,
            latency_s: 0.0,
            iterations_used: 0,
            early_accepted: false,
            repair_calls: 0,
            engine_query: None,
            engine_rows: None,
            gold_rows: None,
            error: None,
        };
        let engine = match self.engine(&q.database) {
            Ok(e) => e,
            Err(e) => {
                rec.error = Some(format!("database {}: {e}", q.database));
                return rec;
            }
        };
        let gold = match self.gold(&engine, q) {
            Ok(g) => g,
            Err(e) => {
                rec.error = Some(e);
                return rec;
            }
        };
        rec.gold_rows = Some(gold.rows.len());
        let opts = RunOptions {
            retry_count: Some(self.cfg.retry_count()),
            row_limit: Some(self.env.row_limit),
            ..RunOptions::default()
        };
        let chat_id = format!("bench-{}-{}", q.id, uuid::Uuid::new_v4());
        let start = Instant::now();
        let outcome = engine.run_with(&chat_id, &q.question, &opts);
        rec.latency_s = start.elapsed().as_secs_f64();
        match outcome {
            Ok(out) => {
                let ev = out.evaluation;
                rec.iterations_used = ev.iterations_used;
                rec.early_accepted = ev.early_accepted;
                rec.repair_calls = ev.repair_calls;
                rec.engine_query = Some(ev.query.clone());
                if let Some(err) = &ev.final_error {
                    rec.error = Some(format!("no error-free execution: {}", err.summary()));
                } else {
                    rec.engine_rows = Some(ev.result.rows.len());
                    rec.correct = score(&ev.result, &gold);
                    rec.empty_match = rec.correct && gold.rows.is_empty() && ev.result.rows.is_empty();
                }
            }
            Err(e) => rec.error = Some(e.to_string()),
        }
        rec
    }

    fn gold(&self, engine: &Engine, q: &BenchmarkQuestion) -> Result<QueryResult, String> {
        let mut db = engine.backends().connector.connect().map_err(|e| format!("gold connection: {e}"))?;
        match db.execute_readonly(&q.gold_sql, self.env.row_limit) {
            Ok(Execution::Rows(r)) => Ok(r),
            Ok(Execution::Failed(e)) => Err(format!("gold query failed: {}", e.summary())),
            Err(e) => Err(format!("gold query failed: {e}")),
        }
    }
}

/// Runs every question through the full pipeline with the config's retry
/// budget. Each question gets a fresh chat id; failures are recorded as
/// incorrect and never stop the run.
pub fn run_benchmark(questions: &[BenchmarkQuestion], cfg: AblationConfig, env: &BenchEnv) -> BenchmarkReport {
    let runner = Runner { env, cfg, engines: Mutex::new(HashMap::new()) };
    let records: Vec<QuestionRecord> = if env.parallelism <= 1 {
        questions.iter().map(|q| runner.run_one(q)).collect()
    } else {
        let next = AtomicUsize::new(0);
        let slots: Mutex<Vec<Option<QuestionRecord>>> = Mutex::new(vec![None; questions.len()]);
        std::thread::scope(|s| {
            for _ in 0..env.parallelism.min(questions.len()) {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(q) = questions.get(i) else { break };
                    let rec = runner.run_one(q);
                    slots.lock().unwrap()[i] = Some(rec);
                });
            }
        });
        slots.into_inner().unwrap().into_iter().map(|r| r.expect("every question ran")).collect()
    };
    for r in &records {
        tracing::info!(id = %r.id, correct = r.correct, latency_s = r.latency_s, "question done");
    }
    BenchmarkReport::from_records(cfg, &env.backend_label, records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn question_file_parsing() {
        let text = r#"{"id":"1","database":"d","question":"q?","gold_sql":"SELECT 1","difficulty":"extra_hard"}

{"id":"2","database":"d","question":"q2","gold_sql":"SELECT 2","difficulty":"challenging","evidence":"e"}"#;
        let qs = parse_questions(text).unwrap();
        assert_eq!(qs.len(), 2);
        assert_eq!(qs[0].difficulty, Difficulty::ExtraHard);
        assert_eq!(qs[1].evidence.as_deref(), Some("e"));
        let dup = format!("{}\n{}", text.lines().next().unwrap(), text.lines().next().unwrap());
        assert!(matches!(parse_questions(&dup), Err(HarnessError::InvalidQuestions { line: 2, .. })));
        assert!(matches!(parse_questions("{"), Err(HarnessError::InvalidQuestions { line: 1, .. })));
    }

    #[test]
    fn config_mapping() {
        assert_eq!(["A", "b", "C"].map(|s| s.parse::<AblationConfig>().unwrap().retry_count()), [5, 1, 0]);
        assert!("D".parse::<AblationConfig>().is_err());
    }
}
