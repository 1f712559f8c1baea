mod bench;
mod migrate;

use std::net::SocketAddr;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use sqlqe_core::api::AppState;
use sqlqe_core::{Config, Engine};

#[derive(Parser)]
#[command(name = "sqlqe", version, about = "Natural-language to read-only PostgreSQL query engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Serve the native and OpenAI-compatible HTTP routes.
    Serve {
        #[arg(long, default_value = "0.0.0.0")]
        host: String,
        #[arg(long, env = "PORT", default_value_t = 5181)]
        port: u16,
    },
    /// Convert SQLite SQL to PostgreSQL.
    Migrate(migrate::Args),
    /// Run and analyse execution-accuracy benchmarks.
    #[command(subcommand)]
    Bench(bench::Command),
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Serve { host, port } => serve(&host, port).map(|()| ExitCode::SUCCESS),
        Command::Migrate(args) => migrate::run(&args),
        Command::Bench(cmd) => bench::run(cmd).map(|()| ExitCode::SUCCESS),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        ExitCode::FAILURE
    })
}

fn serve(host: &str, port: u16) -> anyhow::Result<()> {
    let config = Config::from_env()?;
    let engine = Engine::new(config.llm.clone(), config.db.clone(), config.kv.clone())?;
    let addr: SocketAddr =
        format!("{host}:{port}").parse().with_context(|| format!("bad listen address {host}:{port}"))?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(sqlqe_core::api::serve(AppState::new(engine, config), addr))?;
    Ok(())
}
