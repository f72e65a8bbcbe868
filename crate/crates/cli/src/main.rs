//! `reatt`: corpus ingestion, BM25, end-to-end training, token indexing,
//! retrieval, domain adaptation, evaluation and head probing.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
//! `RATT_LOG` sets the log level (default `info`).

mod commands;
mod config;
mod error;
mod manifest;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::*;
use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "reatt", version, about = "Retrieval as attention")]
struct Cli {
    /// Caps the worker threads of parallel stages.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Tokenizes a corpus and writes its vocabulary and statistics.
    Ingest(IngestArgs),
    /// Builds a BM25 index and optionally ranks queries with it.
    Bm25(Bm25Args),
    /// Encodes a corpus into a token index for the retrieval head.
    BuildIndex(BuildIndexArgs),
    /// Two-stage retrieval for a query file.
    Retrieve(RetrieveArgs),
    /// End-to-end training from a TOML configuration.
    Train(TrainArgs),
    /// Adapts a checkpoint to a new corpus.
    Adapt(AdaptArgs),
    /// Scores a run or predictions.
    Eval(EvalArgs),
    /// Correlates every head's relevance with gold labels.
    ProbeHeads(ProbeArgs),
    /// Generates a synthetic task.
    Synth(SynthArgs),
}

fn dispatch(command: &Command) -> CliResult<()> {
    match command {
        Command::Ingest(a) => ingest(a),
        Command::Bm25(a) => bm25(a),
        Command::BuildIndex(a) => build_index_cmd(a),
        Command::Retrieve(a) => retrieve(a),
        Command::Train(a) => train(a),
        Command::Adapt(a) => adapt(a),
        Command::Eval(a) => eval(a),
        Command::ProbeHeads(a) => probe(a),
        Command::Synth(a) => synth(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("RATT_LOG", "info"))
        .format_timestamp(None)
        .init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            let err = CliError::Usage(format!("--threads {n}: {e}"));
            eprintln!("error: {err}");
            return ExitCode::from(err.exit_code());
        }
    }
    match dispatch(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
