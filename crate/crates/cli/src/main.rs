use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use unient_cli::commands::{cmd_adapt, cmd_pretrain, cmd_report, cmd_sweep, SweepAxis};
use unient_cli::config::ExperimentConfig;
use unient_cli::CliError;
use unient_core::adapt::Method;

/// Open-set test-time adaptation experiments on the synthetic benchmark.
#[derive(Parser)]
#[command(name = "unient", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the source model and write the checkpoint.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Run seed (defaults to the first entry of `seeds`).
        #[arg(long)]
        seed: Option<u64>,
        /// Override a config field, e.g. --set adapt.lambda1=0.5
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Adapt online over the corrupted stream and write reports.
    Adapt {
        #[arg(long)]
        config: PathBuf,
        /// source | bn_adapt | tent | unient | unient_plus
        #[arg(long)]
        method: Option<String>,
        /// Run a single seed instead of the configured list.
        #[arg(long)]
        seed: Option<u64>,
        /// Write per-batch score/posterior CSVs (filter methods only).
        #[arg(long)]
        dump_scores: bool,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Run one axis sweep and write the aggregated CSV.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// lambda1 | lambda2 | ratio | openness | rounds
        #[arg(long)]
        axis: String,
        /// Comma-separated values, e.g. 0.1,0.2,0.5,1.0
        #[arg(long)]
        values: String,
        #[arg(long)]
        method: Option<String>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Aggregate report_*.json files written by `adapt`.
    Report {
        #[arg(long)]
        config: PathBuf,
        /// Directory to scan (defaults to the config's output_dir).
        #[arg(long)]
        dir: Option<PathBuf>,
    },
}

fn load(config: &Path, set: &[String]) -> Result<ExperimentConfig, CliError> {
    ExperimentConfig::load(config)?.apply_overrides(set)
}

fn parse_method(m: &Option<String>) -> Result<Option<Method>, CliError> {
    m.as_deref()
        .map(|s| Method::parse(s).map_err(|e| CliError::Usage(e.to_string())))
        .transpose()
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Pretrain { config, seed, set } => {
            let cfg = load(&config, &set)?;
            cmd_pretrain(&cfg, seed)
        }
        Command::Adapt {
            config,
            method,
            seed,
            dump_scores,
            set,
        } => {
            let cfg = load(&config, &set)?;
            let method = parse_method(&method)?;
            cmd_adapt(&cfg, method, seed, dump_scores)
        }
        Command::Sweep {
            config,
            axis,
            values,
            method,
            set,
        } => {
            let cfg = load(&config, &set)?;
            let axis = SweepAxis::parse(&axis)?;
            let values: Vec<f64> = values
                .split(',')
                .filter(|v| !v.is_empty())
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|e| CliError::Usage(format!("bad sweep value `{v}`: {e}")))
                })
                .collect::<Result<_, _>>()?;
            let method = parse_method(&method)?;
            cmd_sweep(&cfg, axis, &values, method)
        }
        Command::Report { config, dir } => {
            let cfg = ExperimentConfig::load(&config)?;
            cmd_report(&cfg, dir.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
