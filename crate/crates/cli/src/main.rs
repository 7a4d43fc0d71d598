//! Command-line front end for the retrieval pipeline: synthetic data
//! generation, vocabulary and index construction, masked pretraining,
//! supervised training, evaluation, and prediction inspection.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "ragline", version, about = "retrieval-augmented patient outcome pipeline")]
struct Cli {
    /// Settings file (flat key=value lines); defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed; every stochastic stage derives its own stream from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic patient cohort with planted outcome signal.
    GenData {
        /// Run directory for events, vocabulary, labels, and ground truth.
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a vocabulary from an event file.
    BuildVocab {
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Masked-token pretraining of the encoder; writes the initial model.
    PretrainMlm {
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Embed every history chunk with the given model and index them.
    BuildIndex {
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// Encoder checkpoint; the index records its digest.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print one patient's retrieved chunks as JSON lines.
    Retrieve {
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// Encoder checkpoint; must be the one the index was built with.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        patient: String,
    },
    /// Train the outcome model with the retriever frozen at `--model`.
    Train {
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// Initial checkpoint; also the frozen retriever the index was built with.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score the held-out test split and write metrics with confidence intervals.
    Eval {
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// Frozen retriever checkpoint from the training run.
        #[arg(long)]
        retriever: PathBuf,
        /// Trained model checkpoint.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        index: PathBuf,
        /// splits.json from the training run.
        #[arg(long)]
        splits: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write per-prediction prototype and chunk-weight breakdowns.
    Inspect {
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        retriever: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        splits: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()?;
    }
    let cfg = RunConfig::load(cli.config.as_deref())?;
    let seed = cli.seed;
    match cli.command {
        Command::GenData { out } => commands::gen_data(&cfg, seed, &out),
        Command::BuildVocab { events, out } => commands::build_vocab(&cfg, seed, &events, &out),
        Command::PretrainMlm { events, vocab, out } => {
            commands::pretrain(&cfg, seed, &events, &vocab, &out)
        }
        Command::BuildIndex {
            events,
            vocab,
            model,
            out,
        } => commands::cmd_build_index(&cfg, seed, &events, &vocab, &model, &out),
        Command::Retrieve {
            events,
            vocab,
            model,
            index,
            patient,
        } => commands::retrieve(&cfg, &events, &vocab, &model, &index, &patient),
        Command::Train {
            events,
            vocab,
            model,
            index,
            out,
        } => commands::cmd_train(&cfg, seed, &events, &vocab, &model, &index, &out),
        Command::Eval {
            events,
            vocab,
            retriever,
            model,
            index,
            splits,
            out,
        } => commands::cmd_eval(
            &cfg, seed, &events, &vocab, &retriever, &model, &index, &splits, &out,
        ),
        Command::Inspect {
            events,
            vocab,
            retriever,
            model,
            index,
            splits,
            out,
        } => commands::cmd_inspect(
            &cfg, seed, &events, &vocab, &retriever, &model, &index, &splits, &out,
        ),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
