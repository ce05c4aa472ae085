//! `fedobd` — run, compare, and inspect federated-learning experiments.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error.

mod artifacts;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    /// Bad invocation or bad config — exit 2.
    Usage(String),
    /// The experiment itself failed — exit 1.
    Runtime(String),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self::Usage(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        Self::Runtime(msg.into())
    }
}

#[derive(Parser)]
#[command(name = "fedobd", version, about = "Federated learning with opportunistic block dropout")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute one experiment and write its artifacts.
    Run {
        /// Experiment config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Output directory (default: config's out_dir, then ".").
        #[arg(long)]
        out: Option<PathBuf>,
        /// Root seed override.
        #[arg(long)]
        seed: Option<u64>,
        /// Dotted-path config overrides, e.g. --set lambda=0.5 or
        /// --set dataset.classes=4. Applied before --seed.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Run every [[variants]] entry of a config and tabulate the results.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Summarize a finished run from its report.json.
    Inspect {
        /// A report.json or the directory containing one.
        path: PathBuf,
        /// How many top blocks to list from the contribution log.
        #[arg(long, default_value_t = 5)]
        top: usize,
    },
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { config, out, seed, set } => cmd_run(&config, out, seed, &set),
        Command::Compare { config, out, seed, set } => cmd_compare(&config, out, seed, &set),
        Command::Inspect { path, top } => cmd_inspect(&path, top),
    }
}

fn run_one(cfg: &fedobd_core::RunConfig) -> Result<fedobd_core::RunOutput, CliError> {
    cfg.validate().map_err(|e| CliError::usage(format!("invalid config: {e}")))?;
    fedobd_core::run_federated(cfg).map_err(|e| CliError::runtime(e.to_string()))
}

fn cmd_run(
    config: &std::path::Path,
    out: Option<PathBuf>,
    seed: Option<u64>,
    set: &[String],
) -> Result<(), CliError> {
    let experiment = config::load(config, set, seed, out)?;
    let output = run_one(&experiment.base)?;
    artifacts::write_run(&experiment.out_dir, &output)?;
    print!("{}", artifacts::summary_text(&output.report));
    println!("artifacts: {}", experiment.out_dir.display());
    Ok(())
}

fn cmd_compare(
    config: &std::path::Path,
    out: Option<PathBuf>,
    seed: Option<u64>,
    set: &[String],
) -> Result<(), CliError> {
    let experiment = config::load(config, set, seed, out)?;
    if experiment.variants.len() < 2 {
        return Err(CliError::usage(format!(
            "compare needs at least two [[variants]], found {}",
            experiment.variants.len()
        )));
    }
    let mut rows = Vec::new();
    for (name, cfg) in &experiment.variants {
        let output = run_one(cfg)?;
        artifacts::write_run(&experiment.out_dir.join(name), &output)?;
        rows.push((name.clone(), output.report));
    }
    let table = artifacts::comparison_text(&rows);
    let csv = artifacts::comparison_csv(&rows);
    artifacts::write_file(&experiment.out_dir.join("comparison.txt"), &table)?;
    artifacts::write_file(&experiment.out_dir.join("comparison.csv"), &csv)?;
    print!("{table}");
    println!("artifacts: {}", experiment.out_dir.display());
    Ok(())
}

fn cmd_inspect(path: &std::path::Path, top: usize) -> Result<(), CliError> {
    let report_path = if path.is_dir() { path.join("report.json") } else { path.to_path_buf() };
    let text = std::fs::read_to_string(&report_path)
        .map_err(|e| CliError::usage(format!("cannot read {}: {e}", report_path.display())))?;
    let report: fedobd_core::RunReport = serde_json::from_str(&text)
        .map_err(|e| CliError::usage(format!("malformed report {}: {e}", report_path.display())))?;

    // The contribution log lives next to the report, under the name the
    // report itself declares.
    let log_path = report_path
        .parent()
        .unwrap_or_else(|| std::path::Path::new("."))
        .join(&report.contribution_log);
    let entries = if log_path.is_file() {
        let log_text = std::fs::read_to_string(&log_path)
            .map_err(|e| CliError::usage(format!("cannot read {}: {e}", log_path.display())))?;
        log_text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|line| {
                serde_json::from_str(line).map_err(|e| {
                    CliError::usage(format!("malformed entry in {}: {e}", log_path.display()))
                })
            })
            .collect::<Result<Vec<fedobd_core::ContributionLogEntry>, CliError>>()?
    } else {
        Vec::new()
    };

    print!("{}", artifacts::inspect_text(&report, &entries, top));
    Ok(())
}
