//! `stackwfa`: dataset generation, training, evaluation, oracle checks,
//! benchmarks and action-weight heatmaps.

mod bench;
mod commands;
mod config;
mod heatmap;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use stackwfa::error::Result;

use commands::Ctx;
use config::{FileConfig, RunSection};

#[derive(Debug, Parser)]
#[command(
    name = "stackwfa",
    version,
    about = "Nondeterministic stack RNNs on formal languages and text"
)]
struct Cli {
    /// TOML file with [run], [task], [training] and [search] sections
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Where to write the run manifest (default: beside the main output)
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// Root for default output paths [env: STACKWFA_DATA_DIR]
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample a task dataset
    Gen(commands::GenArgs),
    /// Train one model
    Train(commands::TrainArgs),
    /// Score a checkpoint on a dataset
    Eval(commands::EvalArgs),
    /// Hyperparameter search over learning rates (and clip thresholds)
    Search(commands::SearchArgs),
    /// Compare the stack DP and its gradients with brute-force enumeration
    OracleCheck(bench::OracleArgs),
    /// Seconds per training epoch for each model family
    Bench(bench::BenchArgs),
    /// Export correct-action weights as CSV and a grayscale image
    Heatmap(heatmap::HeatmapArgs),
}

fn run(cli: Cli) -> Result<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    let root = config::data_dir(&RunSection { data_dir: cli.data_dir }, &file.run);
    let ctx = Ctx {
        seed: cli.seed.or(file.seed).unwrap_or(0),
        root,
        manifest: cli.manifest,
        file,
    };
    match cli.command {
        Command::Gen(a) => commands::gen(&ctx, a),
        Command::Train(a) => commands::train(&ctx, a),
        Command::Eval(a) => commands::eval(&ctx, a),
        Command::Search(a) => commands::search(&ctx, a),
        Command::OracleCheck(a) => bench::oracle_check(&ctx, a),
        Command::Bench(a) => bench::bench(&ctx, a),
        Command::Heatmap(a) => heatmap::heatmap(&ctx, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("stackwfa: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
