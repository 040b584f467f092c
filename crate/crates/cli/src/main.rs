//! `blip`: run continual-learning experiments and inspect their reports.

mod stats;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use blip_core::metrics::{fmt_real, load_report, serialize_report};
use blip_core::parallel::with_threads;
use blip_core::{run_continual, Error, RunConfig, RunReport};
use clap::{Parser, Subcommand};
use log::{error, info};
use serde_json::json;

use crate::stats::mean_std;

#[derive(Parser)]
#[command(
    name = "blip",
    version,
    about = "Bit-level information preserving continual learning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a config once per seed.
    Run {
        config: PathBuf,
        /// Override the config's out_dir.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Run a config once per prior Fisher value.
    SweepF0 {
        config: PathBuf,
        /// Comma-separated f0 values.
        #[arg(long, value_delimiter = ',', required = true)]
        f0: Vec<f64>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Print part of a saved report: acc, bwt, matrix, "frozen_hist <task>", config.
    Inspect {
        report_dir: PathBuf,
        #[arg(required = true, num_args = 1..)]
        query: Vec<String>,
    },
}

/// Failure with its exit code: 2 for bad input, 1 for runtime errors.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }

    fn runtime(message: impl Into<String>) -> Self {
        Failure {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidConfig { .. } | Error::InvalidSpec(_) => Failure::usage(e.to_string()),
            other => Failure::runtime(other.to_string()),
        }
    }
}

fn threads() -> usize {
    std::env::var("BLIP_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

fn load_config(path: &Path) -> Result<RunConfig, Failure> {
    // an unreadable config is a usage problem, not a runtime one
    RunConfig::load(path).map_err(|e| Failure::usage(e.to_string()))
}

struct SeedOutcome {
    seed: u64,
    report: RunReport,
}

/// Runs every seed of `config`, writing `seed_<s>/` under `out_dir`.
fn run_seeds(config: &RunConfig, out_dir: &Path) -> Result<Vec<SeedOutcome>, Failure> {
    let mut outcomes = Vec::new();
    for &seed in &config.seeds {
        let dir = out_dir.join(format!("seed_{seed}"));
        info!("seed {seed}: building stream {}", config.stream.name());
        let stream = config.stream.build(seed)?;
        let result = with_threads(threads(), || run_continual(&stream, config, seed));
        match result {
            Ok(report) => {
                serialize_report(&report, &dir)?;
                info!(
                    "seed {seed}: acc {:?} bwt {:?}, report in {}",
                    report.acc,
                    report.bwt,
                    dir.display()
                );
                outcomes.push(SeedOutcome { seed, report });
            }
            Err(failure) => {
                serialize_report(&failure.report, &dir)?;
                return Err(Failure::runtime(format!(
                    "seed {seed}: {} (partial report in {})",
                    failure.error,
                    dir.display()
                )));
            }
        }
    }
    Ok(outcomes)
}

fn summary_json(outcomes: &[SeedOutcome]) -> serde_json::Value {
    let accs: Vec<f64> = outcomes.iter().filter_map(|o| o.report.acc).collect();
    let bwts: Vec<f64> = outcomes.iter().filter_map(|o| o.report.bwt).collect();
    let (acc_mean, acc_std) = mean_std(&accs);
    let (bwt_mean, bwt_std) = mean_std(&bwts);
    let runs: Vec<serde_json::Value> = outcomes
        .iter()
        .map(|o| {
            json!({
                "seed": o.seed,
                "acc": o.report.acc,
                "bwt": o.report.bwt,
                "dir": format!("seed_{}", o.seed),
            })
        })
        .collect();
    json!({
        "acc_mean": acc_mean,
        "acc_std": acc_std,
        "bwt_mean": bwt_mean,
        "bwt_std": bwt_std,
        "runs": runs,
    })
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))
}

fn cmd_run(config_path: &Path, out_dir: Option<PathBuf>) -> Result<(), Failure> {
    let config = load_config(config_path)?;
    let out_dir = out_dir.unwrap_or_else(|| config.out_dir.clone());
    let outcomes = run_seeds(&config, &out_dir)?;
    let summary = serde_json::to_string_pretty(&summary_json(&outcomes)).expect("summary serializes");
    write(&out_dir.join("summary.json"), &(summary + "\n"))?;
    println!("{}", out_dir.display());
    Ok(())
}

fn cmd_sweep_f0(config_path: &Path, f0s: &[f64], out_dir: Option<PathBuf>) -> Result<(), Failure> {
    let base = load_config(config_path)?;
    let out_dir = out_dir.unwrap_or_else(|| base.out_dir.clone());
    let mut csv = String::from("f0,acc_mean,acc_std,bwt_mean,bwt_std\n");
    for &f0 in f0s {
        let mut config = base.clone();
        config.blip.f0 = f0;
        config.validate()?;
        let dir = out_dir.join(format!("f0_{f0:e}"));
        let outcomes = run_seeds(&config, &dir)?;
        let summary = summary_json(&outcomes);
        write(
            &dir.join("summary.json"),
            &(serde_json::to_string_pretty(&summary).unwrap() + "\n"),
        )?;
        let field = |k: &str| summary[k].as_f64().map(fmt_real).unwrap_or_default();
        writeln!(
            csv,
            "{},{},{},{},{}",
            fmt_real(f0),
            field("acc_mean"),
            field("acc_std"),
            field("bwt_mean"),
            field("bwt_std")
        )
        .unwrap();
    }
    std::fs::create_dir_all(&out_dir).map_err(|e| Failure::runtime(format!("{}: {e}", out_dir.display())))?;
    write(&out_dir.join("f0_sweep.csv"), &csv)?;
    println!("{}", out_dir.join("f0_sweep.csv").display());
    Ok(())
}

fn cmd_inspect(dir: &Path, query: &[String]) -> Result<(), Failure> {
    let words: Vec<&str> = query.iter().flat_map(|q| q.split_whitespace()).collect();
    let known = matches!(
        words.as_slice(),
        ["acc"] | ["bwt"] | ["matrix"] | ["config"] | ["frozen_hist", _]
    );
    if !known {
        return Err(Failure::usage(format!(
            "unknown query {:?}; expected acc, bwt, matrix, \"frozen_hist <task>\" or config",
            query.join(" ")
        )));
    }
    let report = load_report(dir)?;
    let missing = |what: &str| Failure::runtime(format!("report has no {what} (run incomplete)"));
    match words.as_slice() {
        ["acc"] => println!("{}", report.acc.ok_or_else(|| missing("acc"))?),
        ["bwt"] => println!("{}", report.bwt.ok_or_else(|| missing("bwt"))?),
        ["matrix"] => {
            let path = dir.join("accuracy_matrix.csv");
            let csv = std::fs::read_to_string(&path).unwrap_or_else(|_| report.accuracy_matrix.to_csv());
            print!("{csv}");
        }
        ["config"] => println!(
            "{}",
            serde_json::to_string_pretty(&report.config).expect("config serializes")
        ),
        ["frozen_hist", t] => {
            let t: usize = t
                .parse()
                .map_err(|_| Failure::usage(format!("frozen_hist needs a task number, got {t:?}")))?;
            let task = report
                .tasks
                .iter()
                .find(|r| r.task_id == t)
                .ok_or_else(|| Failure::usage(format!("no task {t} in report ({} tasks)", report.tasks.len())))?;
            let mut out = String::from("layer");
            for k in 0..=report.total_bits {
                write!(out, ",{k}").unwrap();
            }
            out.push('\n');
            for h in &task.added_bits {
                out.push_str(&h.layer);
                for c in &h.counts {
                    write!(out, ",{c}").unwrap();
                }
                out.push('\n');
            }
            print!("{out}");
        }
        _ => unreachable!("query checked above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { config, out_dir } => cmd_run(config, out_dir.clone()),
        Command::SweepF0 { config, f0, out_dir } => cmd_sweep_f0(config, f0, out_dir.clone()),
        Command::Inspect { report_dir, query } => cmd_inspect(report_dir, query),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            error!("{}", f.message);
            ExitCode::from(f.code)
        }
    }
}
