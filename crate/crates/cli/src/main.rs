//! `ecglm`: command-line entry point for the ECG data plane, the toy
//! model mechanics, curriculum generation and the forecasting benchmark.

mod commands;
mod log;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "ecglm", version, about = "ECG tokenization, masking, statistics and forecasting pipelines")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// TOML config file; environment and flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Emit logs as JSON lines on stderr.
    #[arg(long, global = true)]
    pub log_json: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic ECG record with beat annotations.
    Synth(commands::SynthArgs),
    /// Notch, high-pass, resample and screen a record.
    Preprocess(commands::InOut),
    /// Statistics report for a record.
    Stats(commands::StatsArgs),
    /// Build a token sequence from a record.
    Tokenize(commands::TokenizeArgs),
    /// Attention mask for a token sequence.
    Mask(commands::MaskArgs),
    /// Finite-difference gradient verification.
    Gradcheck(commands::GradcheckArgs),
    /// Train the segment autoencoder.
    TrainAe(commands::TrainAeArgs),
    /// Train the tiny language model on the cross-lead task.
    TrainLm(commands::TrainLmArgs),
    /// Generate curriculum conversations for one stage.
    Datagen(commands::DatagenArgs),
    /// Forecasting benchmark: build, train, eval.
    #[command(subcommand)]
    Forecastbench(commands::ForecastCmd),
    /// Score predictions against truth.
    Eval(commands::EvalArgs),
    /// End-to-end run on synthetic data.
    Demo(commands::DemoArgs),
}

fn main() -> ExitCode {
    let long = format!("{}\nschema version {}", env!("CARGO_PKG_VERSION"), ecglm_core::SCHEMA_VERSION);
    let matches = Cli::command().long_version(&*long.leak()).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let log = log::Log::new(cli.global.log_json);
    match commands::run(cli, &log) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log.error(&format!("{e:#}"));
            ExitCode::from(1)
        }
    }
}
