//! `rem`: train, evaluate, convert and synthesize.

mod commands;
mod datasets;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Exit code 2 for bad invocations, 1 for failures while running.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn runtime(e: impl std::fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }

    pub fn usage(e: impl std::fmt::Display) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "rem", version, about = "Reweighted EM, IWAE and VAE training for deep latent-variable models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes a new run directory under --out.
    Train(TrainArgs),
    /// Estimate held-out log-likelihood for a checkpoint.
    Eval(EvalArgs),
    /// Convert an IDX image file to the text matrix format.
    Convert(ConvertArgs),
    /// Generate a linear-Gaussian dataset with its analytic log marginal.
    Synth(SynthArgs),
}

/// Run settings. Values are applied on top of --config, which is applied on
/// top of the built-in defaults.
#[derive(Args, Debug, Default)]
pub struct RunFlags {
    /// Flat key=value file using the flag names as keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// vae, iwae, rem1 or rem2.
    #[arg(long)]
    pub method: Option<String>,
    /// mnist-fixed, mnist-stochastic, omniglot or synth:<dir>.
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long)]
    pub k: Option<String>,
    #[arg(long)]
    pub latent_dim: Option<String>,
    #[arg(long)]
    pub hidden: Option<String>,
    #[arg(long)]
    pub epochs: Option<String>,
    #[arg(long)]
    pub batch: Option<String>,
    #[arg(long)]
    pub lr: Option<String>,
    #[arg(long)]
    pub epsilon: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
    /// Train on a seeded subset of this many training images.
    #[arg(long)]
    pub subset: Option<String>,
    /// Evaluate on a seeded subset of the test split.
    #[arg(long)]
    pub eval_subset: Option<String>,
    #[arg(long)]
    pub eval_k: Option<String>,
    #[arg(long)]
    pub eval_every: Option<String>,
    #[arg(long)]
    pub checkpoint_every: Option<String>,
    /// Parent directory for run directories.
    #[arg(long)]
    pub out: Option<String>,
    #[arg(long)]
    pub workers: Option<String>,
    /// Dataset root; defaults to $REM_DATA_DIR, then ./data.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
}

impl RunFlags {
    pub fn pairs(&self) -> Vec<(&'static str, &String)> {
        let all = [
            ("method", &self.method),
            ("dataset", &self.dataset),
            ("k", &self.k),
            ("latent-dim", &self.latent_dim),
            ("hidden", &self.hidden),
            ("epochs", &self.epochs),
            ("batch", &self.batch),
            ("lr", &self.lr),
            ("epsilon", &self.epsilon),
            ("seed", &self.seed),
            ("subset", &self.subset),
            ("eval-subset", &self.eval_subset),
            ("eval-k", &self.eval_k),
            ("eval-every", &self.eval_every),
            ("checkpoint-every", &self.checkpoint_every),
            ("out", &self.out),
            ("workers", &self.workers),
        ];
        all.into_iter().filter_map(|(k, v)| v.as_ref().map(|v| (k, v))).collect()
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub flags: RunFlags,
    /// Continue from a checkpoint; only cadence, output and epoch keys may change.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Particles per datapoint; defaults to the checkpoint's eval-k.
    #[arg(long)]
    pub eval_k: Option<usize>,
    /// Defaults to the checkpoint's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Evaluate a seeded subset of the split.
    #[arg(long)]
    pub subset: Option<usize>,
    /// Override the checkpoint's dataset id.
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Output directory; defaults to the checkpoint's directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ConvertArgs {
    /// IDX image file (magic 0x00000803), optionally gzipped.
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Binarize once with this seed instead of writing gray values.
    #[arg(long)]
    pub binarize_seed: Option<u64>,
    /// Keep only the first N images.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Observed dimension D.
    #[arg(long)]
    pub dim: usize,
    #[arg(long)]
    pub latent_dim: usize,
    /// Training points.
    #[arg(long)]
    pub n: usize,
    /// Test points.
    #[arg(long, default_value_t = 500)]
    pub test_n: usize,
    /// Observation noise variance sigma^2.
    #[arg(long, allow_hyphen_values = true)]
    pub noise_var: f64,
    #[arg(long)]
    pub seed: u64,
    /// Loading entries are uniform in +-scale; 0 gives A = 0.
    #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
    pub loading_scale: f64,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train::run(a),
        Command::Eval(a) => commands::eval(a),
        Command::Convert(a) => commands::convert(a),
        Command::Synth(a) => commands::synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
