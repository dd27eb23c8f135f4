//! `sit`: synthetic data, training, evaluation, gradient checks and ablations.

mod commands;
mod dataset;
mod error;
mod fsutil;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sit_core::AblationVariant;

use crate::error::{CliError, CliResult, EXIT_CHECK};

#[derive(Parser)]
#[command(name = "sit", version, about = "Scale-interaction transformer toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic dataset of SITF feature maps plus index.csv.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Backbone channel count of the generated maps.
        #[arg(long, default_value_t = 64)]
        cb: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write it with a JSON run report.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// baseline | no-transformer | no-gmp | full (overrides the config).
        #[arg(long, value_parser = parse_variant)]
        variant: Option<AblationVariant>,
        /// Report path; defaults to `<out>.report.json`.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a saved model on every sample of an index.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Metrics path; defaults to `<model>.eval.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every layer type and model variant.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        cb: usize,
        /// Double the backward of one layer (negative control).
        #[arg(long)]
        corrupt: Option<String>,
        /// Also write the full report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Train all four ablation variants under one config and compare them.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "ablation.json")]
        out: PathBuf,
        #[arg(long)]
        quiet: bool,
    },
}

fn parse_variant(s: &str) -> Result<AblationVariant, String> {
    s.parse().map_err(|e: sit_core::Error| e.to_string())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Synth { n, seed, cb, out } => {
            let index = commands::synth(n, seed, cb, &out)?;
            println!("wrote {} samples to {}", index.records.len(), out.join("index.csv").display());
            Ok(())
        }
        Command::Train { config, data, out, variant, report, quiet } => {
            let report = commands::train(commands::TrainArgs {
                config: &config,
                data: &data,
                out: &out,
                variant,
                report,
                quiet,
            })?;
            commands::print_json(&report);
            Ok(())
        }
        Command::Eval { model, data, out } => {
            let metrics = commands::eval(&model, &data, out)?;
            commands::print_json(&metrics);
            commands::check_metrics(&metrics)
        }
        Command::Gradcheck { seed, cb, corrupt, json } => {
            let rows = commands::gradcheck(seed, cb, corrupt.as_deref())?;
            print!("{}", commands::gradcheck_table(&rows));
            if let Some(path) = json {
                fsutil::write_json(&path, &rows)?;
            }
            let failed = rows.iter().filter(|r| !r.passed).count();
            if failed > 0 {
                return Err(CliError::new(EXIT_CHECK, format!("{failed} of {} gradient checks failed", rows.len())));
            }
            println!("all {} gradient checks passed", rows.len());
            Ok(())
        }
        Command::Ablate { config, data, out, quiet } => {
            let report = commands::ablate(&config, &data, &out, quiet)?;
            print!("{}", report.table());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
