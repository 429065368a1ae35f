//! Experiment driver for the MDGD training laboratory.
//!
//! Subcommands: `pretrain`, `finetune`, `eval`, `diagnose`. Every output
//! byte is determined by the config file and its seeds; wall-clock
//! timestamps live only in the `run_meta.txt` sidecar.
//!
//! Exit codes: 0 ok, 2 config error, 3 I/O error, 4 container
//! format/version error, 5 numeric failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mdgd_core::Error;

#[derive(Parser)]
#[command(name = "mdgd", version, about = "MDGD training laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from scratch on the rich pretraining task.
    Pretrain {
        /// Run configuration (TOML).
        config: PathBuf,
        /// Override the run directory from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fine-tune a pretrained checkpoint on the downstream task.
    Finetune {
        /// Run configuration (TOML).
        config: PathBuf,
        /// Pretrained checkpoint providing φ.
        #[arg(long)]
        pretrained: PathBuf,
        /// Override optim.method (finetune | finetune_align | mdgd |
        /// mdgd_noalign | mdgd_gm).
        #[arg(long)]
        method: Option<String>,
        /// Override optim.alpha.
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint with greedy decoding.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// probe = held-out pretrain-format tasks; target = held-out
        /// downstream samples (also runs the probe suite for the H-score).
        #[arg(long)]
        suite: String,
        /// Output directory (default: alongside the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Representation reports over one or more checkpoints or runs.
    Diagnose {
        /// erank | dump | compare.
        #[arg(long)]
        report: String,
        /// Checkpoint(s) for erank/dump reports; repeatable.
        #[arg(long = "ckpt")]
        ckpts: Vec<PathBuf>,
        /// Run directories for the compare report; repeatable.
        #[arg(long = "run")]
        runs: Vec<PathBuf>,
        /// Representation for dump reports: zvl | visual_last.
        #[arg(long, default_value = "zvl")]
        which: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_)
        | Error::Contract(_)
        | Error::Usage(_)
        | Error::Dim(_)
        | Error::Domain(_)
        | Error::Capacity(_) => 2,
        Error::Io { .. } => 3,
        Error::Format(_) => 4,
        Error::Numeric(_) => 5,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Pretrain { config, out } => commands::pretrain(&config, out.as_deref()),
        Command::Finetune { config, pretrained, method, alpha, out } => {
            commands::finetune(&config, &pretrained, method.as_deref(), alpha, out.as_deref())
        }
        Command::Eval { ckpt, suite, out } => commands::eval(&ckpt, &suite, out.as_deref()),
        Command::Diagnose { report, ckpts, runs, which, out } => {
            commands::diagnose(&report, &ckpts, &runs, &which, out.as_deref())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
