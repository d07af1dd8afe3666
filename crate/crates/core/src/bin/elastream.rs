use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};

use elastream::event::encode_log;
use elastream::harness::{
    diff_files, run_oracle, run_scenario, sweep_migration, RunError, RunOptions, Scenario,
};

#[derive(Parser)]
#[command(
    name = "elastream",
    version,
    about = "Deterministic stream-processing harness"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario on the simulated cluster and compare with the oracle.
    Run {
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Write the JSON report here.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Write one line per network delivery here.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Write the encoded sink log here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute the reference sink log.
    Oracle {
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare two encoded sink logs byte for byte.
    Diff { left: PathBuf, right: PathBuf },
    /// Re-run with the first migration moved across a range of steps.
    Sweep {
        scenario: PathBuf,
        /// Half-open range such as `1..1000`.
        #[arg(long, value_parser = parse_range)]
        migrate_at: Range<u64>,
        #[arg(long, default_value_t = 50)]
        step: u64,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

fn parse_range(s: &str) -> Result<Range<u64>, String> {
    let (a, b) = s.split_once("..").ok_or("expected START..END")?;
    let a: u64 = a.trim().parse().map_err(|e| format!("start: {e}"))?;
    let b: u64 = b.trim().parse().map_err(|e| format!("end: {e}"))?;
    if a >= b {
        return Err("empty range".into());
    }
    Ok(a..b)
}

fn load(path: &Path, seed: Option<u64>) -> Result<Scenario, RunError> {
    let mut s = Scenario::load(path)?;
    if let Some(seed) = seed {
        s.seed = seed;
    }
    Ok(s)
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), RunError> {
    fs::write(path, bytes)
        .map_err(|e| RunError::Startup(format!("cannot write {}: {e}", path.display())))
}

fn now() -> String {
    let secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    format!("generated at unix time {secs}")
}

fn execute(cli: Cli) -> Result<u8, RunError> {
    match cli.command {
        Command::Run {
            scenario,
            seed,
            report,
            trace,
            out,
        } => {
            let s = load(&scenario, seed)?;
            let oracle = run_oracle(&s).map_err(|e| RunError::Startup(e.to_string()))?;
            let run = run_scenario(
                &s,
                &oracle,
                RunOptions {
                    trace: trace.is_some(),
                },
            )?;
            print!("{}", run.report.to_text(&now()));
            if let Some(path) = report {
                write(&path, run.report.to_json().as_bytes())?;
            }
            if let Some(path) = trace {
                let mut text = run.trace.join("\n");
                text.push('\n');
                write(&path, text.as_bytes())?;
            }
            if let Some(path) = out {
                write(&path, &encode_log(&run.sink_log))?;
            }
            Ok(if run.report.passed() { 0 } else { 1 })
        }
        Command::Oracle {
            scenario,
            seed,
            out,
        } => {
            let s = load(&scenario, seed)?;
            let oracle = run_oracle(&s).map_err(|e| RunError::Startup(e.to_string()))?;
            println!("oracle: {} sink events", oracle.sink_log.len());
            if let Some(path) = out {
                write(&path, &encode_log(&oracle.sink_log))?;
            }
            Ok(0)
        }
        Command::Diff { left, right } => {
            let read = |p: &Path| {
                fs::read(p)
                    .map_err(|e| RunError::Startup(format!("cannot read {}: {e}", p.display())))
            };
            let d = diff_files(&read(&left)?, &read(&right)?);
            println!("{d}");
            Ok(if matches!(d, elastream::harness::FileDiff::Equal { .. }) {
                0
            } else {
                1
            })
        }
        Command::Sweep {
            scenario,
            migrate_at,
            step,
            report,
        } => {
            let s = load(&scenario, None)?;
            let points = sweep_migration(&s, migrate_at, step)?;
            let mut failed = 0;
            for p in &points {
                println!(
                    "at_step={} {} outcome={} equal={} deferred={} replica_duplicates={}",
                    p.at_step,
                    if p.passed() { "pass" } else { "FAIL" },
                    p.outcome,
                    p.equal_to_oracle,
                    p.deferred_events,
                    p.replica_duplicates_dropped
                );
                for f in &p.failures {
                    println!("  {f}");
                }
                failed += usize::from(!p.passed());
            }
            println!("{} of {} runs passed", points.len() - failed, points.len());
            if let Some(path) = report {
                let json = serde_json::to_string_pretty(&points).expect("sweep serializes");
                write(&path, json.as_bytes())?;
            }
            Ok(if failed == 0 { 0 } else { 1 })
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
