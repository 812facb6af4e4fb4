//! `pageorder`: generate corpora, train and benchmark page-ordering models.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pageorder::bench::BenchError;
use pageorder::corpus::{CorpusError, EmbedError};
use pageorder::models::ModelError;
use pageorder::training::TrainError;

use crate::config::UsageError;

#[derive(Parser, Debug)]
#[command(name = "pageorder", version, about = "Recover the reading order of shuffled document pages")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct GlobalArgs {
    /// TOML run configuration; every field has a default.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Experiment seed (the corpus seed for `gen`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Comma-separated row keys, or `all`.
    #[arg(long, global = true)]
    pub models: Option<String>,
    /// Worker threads for evaluation.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Corpus file to use instead of generating one.
    #[arg(long, global = true)]
    pub corpus: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate and save a synthetic corpus.
    Gen,
    /// Train one model configuration.
    Train(TrainArgs),
    /// Train or load every configured row and write the report and figure data.
    Bench,
    /// Rebuild figure data from an existing benchmark output directory.
    Figures,
    /// Finite-difference check of every layer, loss and architecture.
    Gradcheck,
    /// Train on short documents only and evaluate on long ones.
    Transfer,
    /// Embed page texts with a remote service and save them as a corpus.
    Embed,
}

#[derive(Args, Debug, Clone, Default)]
pub struct TrainArgs {
    /// Architecture: bilstm, pointer-mlp, pointer-lstm, seq2seq, pairwise.
    #[arg(long)]
    pub arch: Option<String>,
    /// universal, direct or curriculum.
    #[arg(long)]
    pub strategy: Option<String>,
    /// Target length bucket for specialized strategies, e.g. 6-10.
    #[arg(long)]
    pub target: Option<String>,
    /// Positional encoding for seq2seq: learned, sinusoidal, none.
    #[arg(long)]
    pub pe: Option<String>,
    /// Training-state file from an earlier run to continue.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        let usage = cause.is::<UsageError>()
            || matches!(cause.downcast_ref::<BenchError>(), Some(BenchError::Config(_)))
            || matches!(cause.downcast_ref::<TrainError>(), Some(TrainError::Config(_)))
            || matches!(cause.downcast_ref::<CorpusError>(), Some(CorpusError::Config(_)))
            || matches!(cause.downcast_ref::<ModelError>(), Some(ModelError::Config(_)))
            || matches!(cause.downcast_ref::<EmbedError>(), Some(EmbedError::MissingCredentials(_)));
        if usage {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen => commands::gen(&cli.global),
        Command::Train(ref a) => commands::train(&cli.global, a),
        Command::Bench => commands::bench(&cli.global),
        Command::Figures => commands::figures(&cli.global),
        Command::Gradcheck => commands::gradcheck(&cli.global),
        Command::Transfer => commands::transfer(&cli.global),
        Command::Embed => commands::embed(&cli.global),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
