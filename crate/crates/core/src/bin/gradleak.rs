use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gradleak::report::{self, ExperimentConfig, ReportError};

/// Gradient inversion attacks against federated learning defenses.
#[derive(Parser)]
#[command(name = "gradleak", version)]
struct Cli {
    /// Overrides the seed in the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Federated training; writes rounds.jsonl and model.glck.
    Train { config: PathBuf },
    /// Attacks victim gradients under the configured defense.
    Attack { config: PathBuf },
    /// Attacks under every defense of the comparison grid.
    Sweep { config: PathBuf },
    /// Prints a table of the summaries found in a results directory.
    Report { dir: PathBuf },
}

fn load(path: &PathBuf, seed: Option<u64>) -> Result<ExperimentConfig, ReportError> {
    let mut config = ExperimentConfig::load(path)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<(), ReportError> {
    match &cli.command {
        Command::Train { config } => {
            let rounds = report::run_training(&load(config, cli.seed)?)?;
            for r in &rounds {
                report::print(&format!("round {:>3}  accuracy {:.4}\n", r.round, r.accuracy));
            }
        }
        Command::Attack { config } => {
            let r = report::run_experiment(&load(config, cli.seed)?)?;
            report::print(&report::render_table(&[r]));
        }
        Command::Sweep { config } => {
            let reports = report::run_sweep(&load(config, cli.seed)?)?;
            report::print(&report::render_table(&reports));
        }
        Command::Report { dir } => {
            report::print(&report::render_table(&report::collect_reports(dir)?));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(if e.is_config() { 1 } else { 2 })
        }
    }
}
