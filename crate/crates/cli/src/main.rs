//! `cfm`: train, sample, evaluate and guide categorical flow maps.
//!
//! Exit codes: 0 success, 1 I/O or other failure, 2 configuration or argument
//! error, 3 training abort, 4 checkpoint error, 5 selfcheck failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cfm_core::CfmError;

#[derive(Parser)]
#[command(name = "cfm", version, about = "Categorical flow maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a predictor from a TOML run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw samples from a checkpoint.
    Sample(SampleArgs),
    /// Score samples against the exact data distribution.
    Eval(EvalArgs),
    /// Reward-guided SMC sampling.
    Guide(GuideArgs),
    /// Fit the built-in two-class logistic reward and save it.
    FitReward {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the randomized invariant suite.
    Selfcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Check the bound with first-power TD weights; expected to fail.
        #[arg(long)]
        corrupt_bound: bool,
    },
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Run config; defaults to `config.toml` next to the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use the raw parameters instead of the EMA shadow.
    #[arg(long)]
    raw: bool,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SamplerArgs {
    #[arg(long)]
    sampler: Option<String>,
    #[arg(long)]
    nfe: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    sigma0: Option<f64>,
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    sampler: SamplerArgs,
    /// `argmax` or `categorical`.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to sample from; not needed with `--ground-truth`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    raw: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    sampler: SamplerArgs,
    /// Draw from the data distribution itself instead of a model.
    #[arg(long)]
    ground_truth: bool,
    /// Comma-separated samplers for an NFE sweep.
    #[arg(long, value_delimiter = ',')]
    sweep_samplers: Vec<String>,
    /// Comma-separated NFE values for an NFE sweep.
    #[arg(long, value_delimiter = ',')]
    sweep_nfes: Vec<usize>,
    /// Report (JSON) or, for sweeps, the TSV table.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GuideArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// `zero`, `two-class`, or a reward checkpoint path.
    #[arg(long, default_value = "two-class")]
    reward: String,
    #[arg(long)]
    lookahead: Option<String>,
    #[arg(long)]
    nfe: Option<usize>,
    #[arg(long)]
    particles: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

/// A failure with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl From<CfmError> for Failure {
    fn from(e: CfmError) -> Self {
        let code = match e {
            CfmError::Config(_) | CfmError::InvalidArgument(_) => 2,
            CfmError::NonFiniteLoss(_) => 3,
            CfmError::Checkpoint(_) => 4,
            _ => 1,
        };
        Failure { code, message: e.to_string() }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, out } => commands::train(&config, &out),
        Command::Sample(a) => commands::sample(a),
        Command::Eval(a) => commands::eval(a),
        Command::Guide(a) => commands::guide(a),
        Command::FitReward { config, out } => commands::fit_reward(&config, &out),
        Command::Selfcheck { seed, corrupt_bound } => commands::selfcheck(seed, corrupt_bound),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
