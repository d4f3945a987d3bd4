//! `umasplit`: generate synthetic data, train, evaluate and inspect models.

mod commands;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use umasplit::Error;

#[derive(Parser, Debug)]
#[command(name = "umasplit", version, about = "UMA-Split sequence transduction at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset file.
    GenData(GenDataArgs),
    /// Train a model and write the averaged checkpoint and the step log.
    Train(TrainArgs),
    /// Greedy-decode a dataset and report error rate and frame statistics.
    Eval(EvalArgs),
    /// Dump per-frame weights, valleys and segment ids.
    InspectUma(InspectArgs),
    /// Print a one-row summary of rates, split ratios and parameter count.
    Stats(EvalArgs),
    /// Run the finite-difference gradient suite.
    GradCheck(GradCheckArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Flat `key = value` file; flags override it.
    #[arg(long)]
    pub config: Option<std::path::PathBuf>,
    /// Seed of the utterances.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output dataset file.
    #[arg(long)]
    pub out: std::path::PathBuf,
    /// Non-blank vocabulary size.
    #[arg(long)]
    pub vocab: Option<usize>,
    /// Input frames per syllable, `lo:hi`.
    #[arg(long, value_name = "LO:HI")]
    pub frames_per_token: Option<String>,
    /// Tokens per utterance, `lo:hi`.
    #[arg(long, value_name = "LO:HI")]
    pub tokens: Option<String>,
    /// Probability that a syllable carries two tokens.
    #[arg(long)]
    pub pair_prob: Option<f64>,
    /// Standard deviation of the additive feature noise.
    #[arg(long)]
    pub noise_std: Option<f64>,
    /// Number of utterances.
    #[arg(long)]
    pub count: Option<usize>,
    /// Feature dimension.
    #[arg(long)]
    pub feat_dim: Option<usize>,
    /// Seed of the token embeddings; datasets meant to be used together
    /// must share it.
    #[arg(long)]
    pub vocab_seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Flat `key = value` file with model and training keys; flags override it.
    #[arg(long)]
    pub config: Option<std::path::PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for `model.umaw`, `model.conf` and `train.log`.
    #[arg(long)]
    pub out: std::path::PathBuf,
    /// Training dataset.
    #[arg(long)]
    pub data: std::path::PathBuf,
    /// Validation dataset; defaults to holding out the last 5% of `--data`.
    #[arg(long)]
    pub val_data: Option<std::path::PathBuf>,
    /// Threads used for validation passes.
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub steps: Option<u64>,
    /// Utterances per step.
    #[arg(long)]
    pub batch: Option<usize>,
    /// Base learning rate of the warmup schedule.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Warmup steps.
    #[arg(long)]
    pub warmup: Option<u64>,
    /// Decode one token per aggregated frame.
    #[arg(long)]
    pub no_split: bool,
    /// Plain intermediate CTC heads without feeding predictions back.
    #[arg(long)]
    pub no_self_conditioning: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Dataset to decode.
    #[arg(long)]
    pub data: std::path::PathBuf,
    /// Checkpoint stem (without extension) or training output directory.
    #[arg(long)]
    pub model: std::path::PathBuf,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    #[arg(long)]
    pub data: std::path::PathBuf,
    /// Checkpoint stem (without extension) or training output directory.
    #[arg(long)]
    pub model: std::path::PathBuf,
    /// Utterances to dump; repeat or separate with commas.
    #[arg(long, value_delimiter = ',', required = true)]
    pub utt_index: Vec<usize>,
    /// Output file; standard output when absent.
    #[arg(long)]
    pub out: Option<std::path::PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random instances per primitive.
    #[arg(long, default_value_t = 100)]
    pub instances: usize,
}

/// Process exit statuses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Usage = 1,
    Format = 2,
    Numerical = 3,
}

/// A failure that carries its own exit status.
#[derive(Debug)]
pub struct Failure {
    pub status: Status,
    pub message: String,
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Failure {}

fn status_of(err: &anyhow::Error) -> Status {
    if let Some(f) = err.downcast_ref::<Failure>() {
        return f.status;
    }
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::NonFinite { .. } => Status::Numerical,
                e if e.is_format() => Status::Format,
                _ => Status::Usage,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return Status::Format;
        }
    }
    Status::Usage
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(Status::Usage as u8)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::InspectUma(a) => commands::inspect(a),
        Command::Stats(a) => commands::stats(a),
        Command::GradCheck(a) => commands::grad_check(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(status_of(&e) as u8)
        }
    }
}
