//! `infometic` command-line tool.
//!
//! Every run prints its fully resolved configuration to stderr as one JSON
//! line; stdout carries only the command's artifact. Exit codes: 0 success,
//! 1 bad input or usage, 2 checkpoint or shape mismatch, 3 training
//! divergence.

mod bench;
mod config;
mod datagen;
mod failure;
mod score;
mod synth;
mod train;
mod visualize;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use config::{FileConfig, GlobalArgs};
use failure::Failure;

#[derive(Debug, Parser)]
#[command(
    name = "infometic",
    version,
    about = "Reference-free, informative image caption evaluation",
    propagate_version = true
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Score (image, caption) pairs and emit ScoreReport JSON lines.
    Score(score::ScoreArgs),
    /// Train a model on sets written by `datagen`.
    Train(train::TrainArgs),
    /// Build coarse, hard-negative and fine-grained training sets.
    Datagen(datagen::DatagenArgs),
    /// Correlate metric scores with human judgments.
    Bench(bench::BenchArgs),
    /// Render a scored pair as a self-contained HTML page.
    Visualize(visualize::VisualizeArgs),
    /// Write a synthetic toy corpus.
    Synth(synth::SynthArgs),
}

fn run(cli: Cli) -> Result<(), Failure> {
    let file = match &cli.global.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let global = cli.global.overlay(file.global);
    match cli.command {
        Command::Score(a) => score::run(&global, a.overlay(file.score)),
        Command::Train(a) => train::run(&global, a.overlay(file.train)),
        Command::Datagen(a) => datagen::run(&global, a.overlay(file.datagen)),
        Command::Bench(a) => bench::run(&global, a.overlay(file.bench)),
        Command::Visualize(a) => visualize::run(&global, a.overlay(file.visualize)),
        Command::Synth(a) => synth::run(&global, a.overlay(file.synth)),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
