//! `sle`: train, sample, evaluate, cost and ablate spherical-latent
//! generators from the command line.
//!
//! Exit status is 0 on success, 1 on a runtime failure and 2 on a
//! configuration or usage error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "sle", version, about = "Few-step generation in a spherical latent space")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate data, encode it, train a denoiser and write checkpoints.
    Train(TrainArgs),
    /// Draw samples from a checkpoint.
    Sample(SampleArgs),
    /// Score samples against the training data and append to eval.csv.
    Eval(EvalArgs),
    /// Print sampling cost tables.
    Cost(CostArgs),
    /// Run the controlled ablations of a configuration.
    Ablate(AblateArgs),
}

#[derive(Args)]
pub struct TrainArgs {
    /// Run configuration (TOML).
    pub config: PathBuf,
    /// Continue from this checkpoint instead of starting over.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Only report every this many epochs on stderr.
    #[arg(long, default_value_t = 10)]
    pub log_every: usize,
}

#[derive(Args)]
pub struct SampleArgs {
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub steps: usize,
    #[arg(long, default_value_t = 1.0)]
    pub omega: f32,
    #[arg(long, default_value_t = 0.5)]
    pub gamma: f64,
    #[arg(long, default_value_t = 24.0)]
    pub sigma_max: f64,
    /// Class to sample; without it labels cycle through all classes.
    #[arg(long)]
    pub label: Option<usize>,
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Draw fresh noise at every step instead of reusing one draw.
    #[arg(long)]
    pub fresh_eps: bool,
    /// Output CSV.
    #[arg(long, default_value = "samples.csv")]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    /// One row is appended per step count.
    #[arg(long, value_delimiter = ',', default_value = "4")]
    pub steps: Vec<usize>,
    /// Guidance scale; defaults to the checkpoint's `sample.omega`.
    #[arg(long)]
    pub omega: Option<f32>,
    /// Defaults to the checkpoint's `sample.gamma`.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Defaults to the checkpoint's `sample.sigma_max`.
    #[arg(long)]
    pub sigma_max: Option<f64>,
    /// Number of samples, a multiple of the class count; defaults to
    /// `eval.n_samples`.
    #[arg(long)]
    pub n: Option<usize>,
    /// Score the training data against itself instead of sampling.
    #[arg(long)]
    pub reference_self: bool,
    /// Defaults to eval.csv next to the checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CostMode {
    /// Published component costs of the full-scale models.
    Paper,
    /// Layer-by-layer count of the toy model.
    Toy,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TableFormat {
    Text,
    Csv,
}

#[derive(Args)]
pub struct CostArgs {
    #[arg(long, value_enum)]
    pub mode: CostMode,
    #[arg(long, default_value_t = 4)]
    pub steps: usize,
    /// Count the unconditional passes of classifier-free guidance.
    #[arg(long)]
    pub cfg: bool,
    /// Toy mode: take the architecture from this checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Toy mode without a checkpoint, or paper mode with custom component
    /// costs.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "text")]
    pub format: TableFormat,
}

#[derive(Args)]
pub struct AblateArgs {
    pub config: PathBuf,
    /// Defaults to ablate.csv in the configured output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// An error that should end the process with status 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn exit_code(err: &anyhow::Error) -> u8 {
    let config = err.chain().any(|e| {
        e.is::<UsageError>() || matches!(e.downcast_ref::<sphere_latent::Error>(), Some(sphere_latent::Error::Config(_)))
    });
    if config {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = commands::threads_from_env().and_then(|threads| match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Sample(a) => commands::sample(a, threads),
        Command::Eval(a) => commands::eval(a, threads),
        Command::Cost(a) => commands::cost(a),
        Command::Ablate(a) => commands::ablate(a, threads),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", message(&err));
            ExitCode::from(exit_code(&err))
        }
    }
}

/// The error chain joined with ": ", skipping causes the outer message
/// already quotes.
fn message(err: &anyhow::Error) -> String {
    let mut text = String::new();
    for cause in err.chain() {
        let part = cause.to_string();
        if text.ends_with(&part) {
            continue;
        }
        if !text.is_empty() {
            text.push_str(": ");
        }
        text.push_str(&part);
    }
    text
}
