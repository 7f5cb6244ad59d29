//! `scnn`: batch driver for the statistical CNN pipeline.

mod bench;
mod check;
mod common;
mod error;
mod extract;
mod gen;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "scnn", version, about = "Statistical CNN over video snippets")]
struct Cli {
    /// `key = value` run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic moving-square snippets and their tracks.
    Gen(gen::GenArgs),
    /// Fit canonical forms to snippets and report reconstruction error.
    Extract(extract::ExtractArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck(check::GradcheckArgs),
    /// Compare the Clark max with Monte Carlo.
    Oracle(check::OracleArgs),
    /// Train the detector and write a checkpoint.
    Train(train::TrainArgs),
    /// Detect boxes with a trained checkpoint.
    Infer(train::InferArgs),
    /// Operation counts and forward timings against the per-frame baseline.
    Bench(bench::BenchArgs),
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = common::load_config(cli.config.as_deref(), cli.seed)?;
    std::fs::create_dir_all(&cli.out_dir)?;
    let out = cli.out_dir.as_path();
    match cli.command {
        Command::Gen(a) => gen::run(&cfg, out, &a),
        Command::Extract(a) => extract::run(&cfg, out, &a),
        Command::Gradcheck(a) => check::gradcheck(&cfg, out, &a),
        Command::Oracle(a) => check::oracle(&cfg, out, &a),
        Command::Train(a) => train::train(&cfg, out, &a),
        Command::Infer(a) => train::infer(&cfg, out, &a),
        Command::Bench(a) => bench::run(&cfg, out, &a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
