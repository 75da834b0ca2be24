//! `ceres`: generate sessions, pretrain, finetune, evaluate and export corpora.
//!
//! Every run resolves its configuration as defaults, then `--config`, then
//! each `--set key=value`, then `--seed`, and writes a manifest beside its
//! outputs. `CERES_THREADS` caps the worker pool.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use ceres_core::corpus::CorpusFormat;
use ceres_core::eval::Task;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "ceres", version, about = "Session-graph pretraining and retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct RunOpts {
    /// Configuration file of `key = value` lines.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Overrides one configuration key; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Master seed; drawn at random and recorded when absent.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSplit {
    Train,
    Val,
    Test,
    /// Every session of the file.
    All,
}

impl EvalSplit {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalSplit::Train => "train",
            EvalSplit::Val => "val",
            EvalSplit::Test => "test",
            EvalSplit::All => "all",
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic session file.
    GenData {
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        #[command(flatten)]
        run: RunOpts,
    },
    /// Pretrain a model on a session file.
    Pretrain {
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        /// Vocabulary file; defaults to `<data>.vocab`, else built from the data.
        #[arg(long, value_name = "FILE")]
        vocab: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[command(flatten)]
        run: RunOpts,
    },
    /// Finetune a pretrained checkpoint for one task.
    Finetune {
        #[arg(long)]
        task: Task,
        /// Checkpoint file or the run directory holding it.
        #[arg(long, value_name = "PATH")]
        ckpt: PathBuf,
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[command(flatten)]
        run: RunOpts,
    },
    /// Evaluate a checkpoint on one task.
    Eval {
        #[arg(long)]
        task: Task,
        #[arg(long, value_name = "PATH")]
        ckpt: PathBuf,
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = EvalSplit::Test)]
        split: EvalSplit,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[command(flatten)]
        run: RunOpts,
    },
    /// Write a text corpus from a session file.
    ExportCorpus {
        #[arg(long)]
        format: CorpusFormat,
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        #[command(flatten)]
        run: RunOpts,
    },
    /// Finite-difference gradient check of the full model.
    Gradcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Metric oracles, masking statistics and latent isolation.
    Selftest,
}

fn init_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var("CERES_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("CERES_THREADS must be a positive integer, got `{raw}`"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(msg) = init_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(2);
    }
    let result = match &cli.command {
        Command::GenData { out, run } => commands::gen_data(run, out),
        Command::Pretrain { data, vocab, out, run } => commands::pretrain_cmd(run, data, vocab.as_deref(), out),
        Command::Finetune { task, ckpt, data, out, run } => commands::finetune_cmd(run, *task, ckpt, data, out),
        Command::Eval {
            task,
            ckpt,
            data,
            split,
            out,
            run,
        } => commands::eval_cmd(run, *task, ckpt, data, *split, out),
        Command::ExportCorpus { format, data, out, run } => commands::export_cmd(run, *format, data, out),
        Command::Gradcheck { seed } => commands::gradcheck_cmd(*seed),
        Command::Selftest => commands::selftest_cmd(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
