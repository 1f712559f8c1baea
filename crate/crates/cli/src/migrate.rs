use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use serde::Serialize;
use sqlqe_core::migrate::{ConversionOutcome, Migrator, SchemaHints, Verdict};

pub const EXIT_UNCONVERTIBLE: u8 = 3;

#[derive(clap::Args)]
pub struct Args {
    /// SQLite input file.
    #[arg(long = "in")]
    input: PathBuf,
    /// PostgreSQL output file.
    #[arg(long)]
    out: PathBuf,
    /// Treat the input as CREATE TABLE statements.
    #[arg(long)]
    ddl: bool,
    /// One statement per line; unconvertible lines are written as comments.
    #[arg(long)]
    batch: bool,
    /// Where batch mode writes its JSON verdict report (default: stdout).
    #[arg(long, requires = "batch")]
    report: Option<PathBuf>,
    /// SQLite DDL whose table and column names guide identifier-sensitive rules.
    #[arg(long)]
    schema: Option<PathBuf>,
}

#[derive(Serialize)]
struct LineVerdict<'a> {
    line: usize,
    input: &'a str,
    #[serde(flatten)]
    outcome: ConversionOutcome,
}

fn read(path: &Path) -> anyhow::Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn run(args: &Args) -> anyhow::Result<ExitCode> {
    let hints = match &args.schema {
        Some(p) => SchemaHints::from_ddl(&read(p)?)?,
        None => SchemaHints::default(),
    };
    let migrator = Migrator::with_hints(hints);
    let convert = |sql: &str| if args.ddl { migrator.convert_ddl(sql) } else { migrator.convert(sql) };
    let input = read(&args.input)?;

    if !args.batch {
        let outcome = convert(&input)?;
        if let Some(sql) = outcome.converted.as_deref().filter(|_| outcome.is_converted()) {
            write(&args.out, &(sql.trim_end().to_string() + "\n"))?;
            return Ok(ExitCode::SUCCESS);
        }
        if let Verdict::Unconvertible(reason) = &outcome.verdict {
            eprintln!("unconvertible: {reason}");
        }
        return Ok(ExitCode::from(EXIT_UNCONVERTIBLE));
    }

    let mut out = String::new();
    let mut verdicts = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let sql = line.trim();
        if sql.is_empty() || sql.starts_with("--") {
            continue;
        }
        let outcome = convert(sql).with_context(|| format!("line {}", i + 1))?;
        match (&outcome.verdict, &outcome.converted) {
            (Verdict::Converted, Some(c)) => out.push_str(c),
            (Verdict::Unconvertible(reason), _) => out.push_str(&format!("-- unconvertible ({reason}): {sql}")),
            (Verdict::Converted, None) => unreachable!("converted outcomes carry SQL"),
        }
        out.push('\n');
        verdicts.push(LineVerdict { line: i + 1, input: sql, outcome });
    }
    write(&args.out, &out)?;
    let report = serde_json::to_string_pretty(&verdicts)? + "\n";
    match &args.report {
        Some(p) => write(p, &report)?,
        None => print!("{report}"),
    }
    let failed = verdicts.iter().filter(|v| !v.outcome.is_converted()).count();
    if failed > 0 {
        eprintln!("{failed} of {} statement(s) unconvertible", verdicts.len());
        return Ok(ExitCode::from(EXIT_UNCONVERTIBLE));
    }
    Ok(ExitCode::SUCCESS)
}
