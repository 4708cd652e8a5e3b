//! Command-line driver.
//!
//! Exit codes: `0` — ran, all criteria passed; `1` — ran, at least one
//! criterion failed (the report is still written); `2` — configuration
//! error, nothing ran; `3` — a solver failed mid-run (the report is written
//! with the failure recorded).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fbsde_cli::config::{self, ConfigError, ScenarioConfig};
use fbsde_cli::runner::{run_scenario, RunSettings};
use fbsde_cli::scenarios;

#[derive(Parser)]
#[command(
    name = "fbsde",
    version,
    about = "Numerical laboratory for coupled semi-linear parabolic systems"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario to completion and write its report.
    Run {
        /// Path to a scenario JSON file, or the name of a shipped scenario.
        config: String,
        /// Override the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Size of the worker thread pool (default: one per core). Results
        /// are identical for every setting; only wall time changes.
        #[arg(long)]
        threads: Option<usize>,
        /// Output directory (default: the scenario's `output_dir`, else
        /// `out/<label>`).
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Treat assumption-audit warnings as criterion failures.
        #[arg(long)]
        strict: bool,
    },
    /// List the shipped scenarios with one-line descriptions.
    ListScenarios,
    /// Print a shipped scenario's full configuration document.
    Describe {
        /// Name of a shipped scenario.
        scenario: String,
    },
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run {
            config,
            seed,
            threads,
            out_dir,
            strict,
        } => run(&config, seed, threads, out_dir, strict),
        Command::ListScenarios => {
            for (name, description) in scenarios::catalog() {
                println!("{name}: {description}");
            }
            ExitCode::SUCCESS
        }
        Command::Describe { scenario } => match scenarios::find(&scenario) {
            Some(s) => {
                print!("{}", s.json);
                ExitCode::SUCCESS
            }
            None => {
                eprintln!(
                    "error: no shipped scenario named {scenario:?}; available: {}",
                    scenarios::SCENARIOS
                        .iter()
                        .map(|s| s.name)
                        .collect::<Vec<_>>()
                        .join(", ")
                );
                ExitCode::from(2)
            }
        },
    }
}

/// Resolve the `run` argument: an existing file wins, then the shipped
/// catalog.
fn load(arg: &str) -> Result<ScenarioConfig, ConfigError> {
    let path = Path::new(arg);
    if path.is_file() {
        config::load_config(path)
    } else if let Some(s) = scenarios::find(arg) {
        config::parse_config(s.json, s.name)
    } else {
        Err(ConfigError::Io {
            path: arg.to_string(),
            detail: "no file at this path and no shipped scenario with this name \
                     (see `fbsde list-scenarios`)"
                .to_string(),
        })
    }
}

fn run(
    config_arg: &str,
    seed: Option<u64>,
    threads: Option<usize>,
    out_dir: Option<PathBuf>,
    strict: bool,
) -> ExitCode {
    if let Some(n) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} worker threads: {e}");
            return ExitCode::from(2);
        }
    }
    let cfg = match load(config_arg) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let validated = match config::validate(&cfg) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let settings = RunSettings {
        seed: seed.unwrap_or(cfg.seed),
        strict,
        out_dir: out_dir
            .or_else(|| cfg.output_dir.clone().map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("out").join(&cfg.label)),
    };

    println!("scenario {} (seed {})", cfg.label, settings.seed);
    let report = match run_scenario(&cfg, &validated, &settings) {
        Ok(report) => report,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(3);
        }
    };

    for task in &report.results.tasks {
        println!("  [{}] {:<16} {}", task.index, task.task, task.status);
        for criterion in &task.criteria {
            if criterion.passed {
                println!("        ok   {}", criterion.name);
            } else {
                println!("        FAIL {}: {}", criterion.name, criterion.detail);
            }
        }
    }
    if let Some(err) = &report.results.solver_error {
        eprintln!("solver failure: {err}");
    }
    println!("report: {}", settings.out_dir.join("report.json").display());

    if report.results.solver_error.is_some() {
        ExitCode::from(3)
    } else if report.results.passed {
        println!("result: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("result: at least one criterion failed");
        ExitCode::from(1)
    }
}
