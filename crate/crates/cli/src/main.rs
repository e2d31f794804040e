use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::parser::ValueSource;
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use logattn_cli::bench::{run_bench, write_csv, MAX_LOG2_N};
use logattn_cli::check::run_check;
use logattn_cli::demo::run_demo;
use logattn_cli::{HarnessError, RunConfig};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(
    name = "logattn",
    version,
    about = "Log-space attention test and benchmark harness"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every equivalence and invariant check; JSON report
    Check(RunConfig),
    /// Time each form over n = 128 .. 16384; CSV report
    Bench(RunConfig),
    /// Snapshot and resume a stream halfway; JSON report
    StreamDemo(DemoArgs),
}

#[derive(Debug, Args)]
struct DemoArgs {
    #[command(flatten)]
    config: RunConfig,
    /// Where to write the mid-stream snapshot (default: OS temp dir)
    #[arg(long)]
    snapshot: Option<PathBuf>,
    /// Resume from an existing snapshot instead of writing one
    #[arg(long, conflicts_with = "snapshot")]
    resume_from: Option<PathBuf>,
}

fn sink(out: Option<&Path>) -> Result<Box<dyn Write>, HarnessError> {
    Ok(match out {
        Some(path) => Box::new(File::create(path).map_err(|e| HarnessError::io(path, e))?),
        None => Box::new(io::stdout().lock()),
    })
}

fn write_json<T: Serialize>(report: &T, out: Option<&Path>) -> Result<(), HarnessError> {
    let mut w = sink(out)?;
    serde_json::to_writer_pretty(&mut w, report)?;
    writeln!(w).map_err(|e| HarnessError::io(out.unwrap_or(Path::new("<stdout>")), e))?;
    Ok(())
}

fn run(command: Command) -> Result<bool, HarnessError> {
    match command {
        Command::Check(config) => {
            let report = run_check(&config)?;
            for p in report.properties.iter().filter(|p| !p.passed) {
                eprintln!("FAIL {}: {:.3e} > {:.1e}", p.name, p.max_error, p.tolerance);
            }
            write_json(&report, config.out.as_deref())?;
            Ok(report.passed)
        }
        Command::Bench(config) => {
            let rows = run_bench(&config)?;
            for r in &rows {
                eprintln!(
                    "n = {:>5}  {:<10} {:>12.1} ns/token  {:>10} state bytes",
                    r.n, r.form, r.per_token_ns, r.state_bytes
                );
            }
            write_csv(&rows, sink(config.out.as_deref())?)?;
            Ok(true)
        }
        Command::StreamDemo(args) => {
            let report = run_demo(
                &args.config,
                args.snapshot.as_deref(),
                args.resume_from.as_deref(),
            )?;
            write_json(&report, args.config.out.as_deref())?;
            Ok(report.passed)
        }
    }
}

fn parse() -> Cli {
    let matches = Cli::command().get_matches();
    let mut cli = Cli::from_arg_matches(&matches).unwrap_or_else(|e| e.exit());
    // bench sweeps up to 2^14 unless --n is given
    if let (Command::Bench(config), Some(("bench", sub))) = (&mut cli.command, matches.subcommand()) {
        if sub.value_source("n") == Some(ValueSource::DefaultValue) {
            config.n = 1 << MAX_LOG2_N;
        }
    }
    cli
}

fn main() -> ExitCode {
    let cli = parse();
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
