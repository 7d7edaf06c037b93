//! `glocal` — train, evaluate and dissect the two-headed classifier from
//! the command line. Settings merge as flag → config file → default, and
//! every command is deterministic for a fixed seed. The environment
//! variable `GLOCAL_THREADS` bounds worker parallelism.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;

use commands::{CommonOpts, DataOpts, EvalOpts, ModelOpts, TrainOpts};

#[derive(Parser, Debug)]
#[command(name = "glocal", version, about = "global + label-wise text classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write its checkpoint, vocabulary and log
    Train {
        #[command(flatten)]
        common: CommonOpts,
        #[command(flatten)]
        data: DataOpts,
        #[command(flatten)]
        model: ModelOpts,
        #[command(flatten)]
        train: TrainOpts,
    },
    /// Score a checkpoint on a held-out split
    Eval {
        #[command(flatten)]
        common: CommonOpts,
        #[command(flatten)]
        data: DataOpts,
        #[command(flatten)]
        eval: EvalOpts,
        /// Checkpoint to load
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Write per-document label scores here
        #[arg(long, value_name = "PATH")]
        dump: Option<PathBuf>,
    },
    /// Retrain once per layer and compare the heads
    Ablate {
        #[command(flatten)]
        common: CommonOpts,
        #[command(flatten)]
        data: DataOpts,
        #[command(flatten)]
        model: ModelOpts,
        #[command(flatten)]
        train: TrainOpts,
        #[command(flatten)]
        eval: EvalOpts,
        /// Layers to sweep: inclusive range `A..B` or comma list
        #[arg(long, default_value = "0..2")]
        layers: String,
        /// Freeze the global classifier during each run
        #[arg(long)]
        fix_global: bool,
        /// Directory for ablation.csv and ablation.svg
        #[arg(long, value_name = "DIR")]
        out_dir: Option<PathBuf>,
    },
    /// Compare analytic gradients against finite differences
    Gradcheck {
        #[command(flatten)]
        common: CommonOpts,
        #[command(flatten)]
        model: ModelOpts,
        /// Finite-difference step
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        /// Max relative error allowed
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Generate a planted-keyword corpus as train/test TSV files
    Synth {
        #[command(flatten)]
        common: CommonOpts,
        /// Documents in the training split
        #[arg(long, default_value_t = 2000)]
        docs: usize,
        #[arg(long, default_value_t = 50)]
        labels: usize,
        /// Content vocabulary size
        #[arg(long, default_value_t = 500)]
        vocab_size: usize,
        /// Shortest document, in tokens
        #[arg(long, default_value_t = 8)]
        len_min: usize,
        /// Longest document, in tokens
        #[arg(long, default_value_t = 20)]
        len_max: usize,
        /// Per-label flip probability applied to each document's label set
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        /// Directory for train.tsv and test.tsv
        #[arg(long, value_name = "DIR")]
        out_dir: PathBuf,
    },
    /// Average several prediction dumps into one
    Ensemble {
        /// Prediction dumps to merge
        #[arg(required = true, value_name = "PATH")]
        inputs: Vec<PathBuf>,
        /// Output path (stdout when omitted)
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
        /// Keep only the top k labels per document
        #[arg(long)]
        k: Option<usize>,
    },
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match &cli.command {
        Command::Train {
            common,
            data,
            model,
            train,
        } => commands::cmd_train(common, data, model, train),
        Command::Eval {
            common,
            data,
            eval,
            checkpoint,
            dump,
        } => commands::cmd_eval(common, data, eval, checkpoint, dump),
        Command::Ablate {
            common,
            data,
            model,
            train,
            eval,
            layers,
            fix_global,
            out_dir,
        } => commands::cmd_ablate(common, data, model, train, eval, layers, *fix_global, out_dir),
        Command::Gradcheck {
            common,
            model,
            eps,
            tol,
        } => commands::cmd_gradcheck(common, model, *eps, *tol),
        Command::Synth {
            common,
            docs,
            labels,
            vocab_size,
            len_min,
            len_max,
            noise,
            out_dir,
        } => commands::cmd_synth(
            common, *docs, *labels, *vocab_size, *len_min, *len_max, *noise, out_dir,
        ),
        Command::Ensemble { inputs, out, k } => commands::cmd_ensemble(inputs, out, *k),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
