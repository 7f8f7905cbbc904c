// SPDX-License-Identifier: Apache-2.0

//! `cmprobe`: train and evaluate countermeasure heads on stored activations.

mod commands;
mod output;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "cmprobe", version, about = "Countermeasure heads over frozen SSL activations")]
struct Cli {
    /// Overrides the seed of the command's configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic activations and manifests from a profile.
    Synth {
        #[arg(long)]
        profile: PathBuf,
    },
    /// Train one head and write its checkpoint and training history.
    Train {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[arg(long, value_enum)]
        head: HeadArg,
        /// Layer index, or `all`.
        #[arg(long, default_value = "all")]
        layer: String,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Train a mean-pooling probe per layer and score every evaluation corpus.
    Sweep {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[arg(long = "eval", required = true, num_args = 1..)]
        eval: Vec<PathBuf>,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Score a manifest with a checkpoint.
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Score several manifests with a checkpoint and tabulate their EERs.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "manifest", required = true, num_args = 1..)]
        manifests: Vec<PathBuf>,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Print the EER of a score file against manifest labels.
    Eer {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Export the layer weights of an MHFA checkpoint.
    Weights {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Fit a fusion model on labelled scores.
    FuseFit {
        #[arg(long = "scores", required = true, num_args = 1..)]
        scores: Vec<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "lr")]
        mode: FuseMode,
        #[arg(long)]
        prior: Option<f64>,
        #[arg(long)]
        lambda: Option<f64>,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Apply a fitted fusion model.
    FuseApply {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "scores", required = true, num_args = 1..)]
        scores: Vec<PathBuf>,
    },
    /// Combine sweep, evaluation and weight files into tables and plot data.
    Report {
        #[arg(long = "sweep", required = true, num_args = 1..)]
        sweeps: Vec<PathBuf>,
        /// Evaluation CSVs of full-layer heads, as written by `evaluate`.
        #[arg(long = "mhfa", num_args = 1..)]
        mhfa: Vec<PathBuf>,
        #[arg(long = "weights", num_args = 1..)]
        weights: Vec<PathBuf>,
        /// Corpus excluded from best-single-layer selection and the average.
        #[arg(long, default_value = "indomain")]
        in_domain: String,
    },
}

#[derive(Args, Debug)]
struct ConfigArg {
    /// JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum HeadArg {
    Mp,
    Mhfa,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum FuseMode {
    Lr,
    Sum,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&e));
            ExitCode::FAILURE
        }
    }
}

/// The error chain on one line; causes already quoted by their parent are skipped.
fn one_line(e: &anyhow::Error) -> String {
    let mut message = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !message.contains(&text) {
            if !message.is_empty() {
                message.push_str(": ");
            }
            message.push_str(&text);
        }
    }
    message.replace('\n', " ")
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        anyhow::ensure!(n >= 1, "--threads must be >= 1");
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let ctx = commands::Context { seed: cli.seed, out: cli.out };
    match cli.command {
        Command::Synth { profile } => commands::synth(&ctx, &profile),
        Command::Train { train, val, head, layer, config } => {
            let kind = match head {
                HeadArg::Mp => cmprobe::heads::HeadKind::Mp,
                HeadArg::Mhfa => cmprobe::heads::HeadKind::Mhfa,
            };
            commands::train(&ctx, &train, &val, kind, &layer, config.config.as_deref())
        }
        Command::Sweep { train, val, eval, config } => {
            commands::sweep(&ctx, &train, &val, &eval, config.config.as_deref())
        }
        Command::Score { checkpoint, manifest, config } => {
            commands::score(&ctx, &checkpoint, &manifest, config.config.as_deref())
        }
        Command::Evaluate { checkpoint, manifests, config } => {
            commands::evaluate(&ctx, &checkpoint, &manifests, config.config.as_deref())
        }
        Command::Eer { scores, manifest } => commands::eer(&scores, &manifest),
        Command::Weights { checkpoint } => commands::weights(&ctx, &checkpoint),
        Command::FuseFit { scores, manifest, mode, prior, lambda, config } => commands::fuse_fit(
            &ctx,
            &scores,
            &manifest,
            mode == FuseMode::Sum,
            prior,
            lambda,
            config.config.as_deref(),
        ),
        Command::FuseApply { model, scores } => commands::fuse_apply(&ctx, &model, &scores),
        Command::Report { sweeps, mhfa, weights, in_domain } => {
            report::run(&ctx, &sweeps, &mhfa, &weights, &in_domain)
        }
    }
}
