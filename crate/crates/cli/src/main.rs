//! `mmfeat`: train, extract, match, evaluate and plot.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime abort.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use crate::config::{default_of, keys_help};

#[derive(Debug, Parser)]
#[command(name = "mmfeat", version, about = "Cross-modal keypoint detection and description: training and registration benchmark")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML file with [train] and [benchmark] tables
    #[arg(long, global = true, env = "MMFEAT_CONFIG", value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Seed for training and evaluation (sets train.seed and benchmark.seed)
    #[arg(long, global = true, env = "MMFEAT_SEED", value_name = "N")]
    pub seed: Option<u64>,
    /// Override a configuration key; repeatable, last wins
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Run directory for every produced file [default: runs/<command>]
    #[arg(long, global = true, env = "MMFEAT_OUT", value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoints and a step log
    Train(TrainArgs),
    /// Extract keypoints and descriptors for every pair of a dataset
    Extract(ExtractArgs),
    /// Match two feature files and estimate the homography between them
    Match(MatchArgs),
    /// Score features or a checkpoint on a dataset
    Evaluate(EvaluateArgs),
    /// Draw RR, MS and SRR curves from one or more reports
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Manifest path or synth://<recipe>[?count=N&size=S&seed=K&offset=O]
    #[arg(long, value_name = "URI")]
    pub dataset: Option<String>,
    /// Number of optimizer steps
    #[arg(long, value_name = "N")]
    pub iterations: Option<usize>,
    /// recoupled or naive-coupled
    #[arg(long, value_name = "NAME")]
    pub objective: Option<String>,
    /// Weight of the repeatability term
    #[arg(long, value_name = "X")]
    pub lambda: Option<f64>,
    /// Initial learning rate
    #[arg(long, value_name = "X")]
    pub lr: Option<f64>,
    /// Training crop side in pixels
    #[arg(long, value_name = "PX")]
    pub crop_size: Option<usize>,
    /// Pairs per step
    #[arg(long, value_name = "N")]
    pub batch_size: Option<usize>,
    /// Continue from this checkpoint
    #[arg(long, value_name = "CKPT")]
    pub resume: Option<PathBuf>,
    /// Print a progress line every N steps (0 disables)
    #[arg(long, value_name = "N", default_value_t = 10)]
    pub log_every: usize,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    /// Trained checkpoint
    #[arg(long, value_name = "CKPT")]
    pub checkpoint: PathBuf,
    /// Manifest path or synth:// URI
    #[arg(long, value_name = "URI")]
    pub dataset: String,
    /// Keypoints per image
    #[arg(long, value_name = "N")]
    pub k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    /// Feature file of image A
    #[arg(long, value_name = "FILE")]
    pub a: PathBuf,
    /// Feature file of image B
    #[arg(long, value_name = "FILE")]
    pub b: PathBuf,
    /// Ground-truth homography (A to B); adds reprojection errors
    #[arg(long, value_name = "FILE")]
    pub homography: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Feature manifest written by `extract`
    #[arg(long, value_name = "FILE", conflicts_with_all = ["checkpoint", "dataset"], required_unless_present = "checkpoint")]
    pub features: Option<PathBuf>,
    /// Trained checkpoint to extract with
    #[arg(long, value_name = "CKPT", requires = "dataset")]
    pub checkpoint: Option<PathBuf>,
    /// Manifest path or synth:// URI (with --checkpoint)
    #[arg(long, value_name = "URI")]
    pub dataset: Option<String>,
    /// Keypoints per image
    #[arg(long, value_name = "N")]
    pub k: Option<usize>,
    /// Pairs evaluated in parallel
    #[arg(long, value_name = "N")]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Report CSV, or a directory holding report.csv; `LABEL=PATH` names
    /// the curve. Repeatable.
    #[arg(long = "report", value_name = "[LABEL=]PATH", required = true)]
    pub reports: Vec<String>,
}

/// Flags that stand for a configuration key: (subcommand, flag id, key).
const FLAG_KEYS: &[(&str, &str, &str)] = &[
    ("train", "dataset", "train.dataset"),
    ("train", "iterations", "train.iterations"),
    ("train", "objective", "train.objective"),
    ("train", "lambda", "train.loss.lambda"),
    ("train", "lr", "train.lr_init"),
    ("train", "crop_size", "train.crop_size"),
    ("train", "batch_size", "train.batch_size"),
    ("extract", "k", "benchmark.k"),
    ("evaluate", "k", "benchmark.k"),
    ("evaluate", "workers", "benchmark.workers"),
];

/// The clap command with defaults filled in from the config schema.
pub fn command() -> clap::Command {
    let mut cmd = Cli::command();
    let keys = keys_help();
    for name in ["train", "extract", "match", "evaluate", "plot"] {
        cmd = cmd.mut_subcommand(name, |mut sub| {
            for &(_, id, key) in FLAG_KEYS.iter().filter(|(s, _, _)| *s == name) {
                sub = sub.mut_arg(id, |a| {
                    let help = a.get_help().map(|h| h.to_string()).unwrap_or_default();
                    a.help(format!("{help} [default: {}] [config: {key}]", default_of(key)))
                });
            }
            sub.after_help(keys.clone())
        });
    }
    cmd
}

fn main() -> ExitCode {
    let matches = match command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.error);
            if let Some(hint) = f.hint {
                eprintln!("hint: {hint}");
            }
            ExitCode::from(f.exit_code())
        }
    }
}
