use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use sqlqe_core::db::{Connector, PgConnector};
use sqlqe_core::events::MemoryBus;
use sqlqe_core::harness::{
    compare, latency_stats, load_questions, render_comparison, render_table, run_benchmark, AblationConfig, BenchEnv,
    BenchmarkReport,
};
use sqlqe_core::llm::{ChatBackend, HttpLlm, LlmParams, Playbook, ScriptedLlm};
use sqlqe_core::session::SessionStore;
use sqlqe_core::Config;

#[derive(clap::Subcommand)]
pub enum Command {
    /// Run every question through the full pipeline under one config.
    Run {
        /// JSON Lines question file.
        #[arg(long)]
        questions: PathBuf,
        /// Ablation config: A (5 repairs), B (1) or C (0).
        #[arg(long)]
        config: AblationConfig,
        /// An OpenAI-compatible base URL, or `scripted:<playbook.json>`.
        #[arg(long)]
        backend: String,
        /// Where to write the JSON report.
        #[arg(long)]
        out: PathBuf,
        /// Questions run concurrently; latency figures then include contention.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
    },
    /// Compare two reports over the same questions.
    Compare {
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        candidate: PathBuf,
    },
    /// Print the table and latency statistics of a report.
    Stats { report: PathBuf },
}

pub fn run(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Run { questions, config, backend, out, parallel } => {
            let report = run_questions(&questions, config, &backend, parallel)?;
            report.save(&out)?;
            print!("{}", render_table(&report));
        }
        Command::Compare { baseline, candidate } => {
            let c = compare(&load(&baseline)?, &load(&candidate)?)?;
            print!("{}", render_comparison(&c));
        }
        Command::Stats { report } => {
            let report = load(&report)?;
            latency_stats(&report)?;
            print!("{}", render_table(&report));
        }
    }
    Ok(())
}

fn load(path: &Path) -> anyhow::Result<BenchmarkReport> {
    BenchmarkReport::load(path).with_context(|| format!("loading report {}", path.display()))
}

fn llm_backend(spec: &str, defaults: &LlmParams) -> anyhow::Result<(Arc<dyn ChatBackend>, String)> {
    if let Some(path) = spec.strip_prefix("scripted:") {
        let playbook = Playbook::load(Path::new(path))?;
        return Ok((Arc::new(ScriptedLlm::routed(playbook)), spec.to_string()));
    }
    if !(spec.starts_with("http://") || spec.starts_with("https://")) {
        bail!("backend must be an http(s) URL or scripted:<playbook>, got {spec:?}");
    }
    let params = LlmParams { base_url: spec.to_string(), ..defaults.clone() };
    Ok((Arc::new(HttpLlm::new(params)?), format!("{spec} ({})", defaults.model)))
}

fn run_questions(path: &Path, cfg: AblationConfig, backend: &str, parallel: usize) -> anyhow::Result<BenchmarkReport> {
    let questions = load_questions(path)?;
    let config = Config::from_env()?;
    let (llm, label) = llm_backend(backend, &config.llm)?;
    let db = config.db;
    let connectors = Box::new(move |database: &str| {
        let params = sqlqe_core::ConnectionParams { dbname: database.to_string(), ..db.clone() };
        Ok(Arc::new(PgConnector::new(params)?) as Arc<dyn Connector>)
    });
    let (store, _) = SessionStore::in_memory();
    let mut env = BenchEnv::new(llm, connectors, store, Arc::new(MemoryBus::new()));
    env.backend_label = label;
    env.parallelism = parallel.max(1);
    Ok(run_benchmark(&questions, cfg, &env))
}
