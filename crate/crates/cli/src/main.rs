//! `mcn`: corpus generation, training, evaluation, localization, baselines and
//! gradient checks for moment context networks.
//!
//! Exit codes: 0 success, 1 check failure, 2 usage or input error, 3 numerical
//! divergence.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mcn::config::ConfigError;
use mcn::data::DataError;
use mcn::eval::EvalError;
use mcn::model::ModelError;
use mcn::numerics::NumericsError;

use settings::Settings;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Check(String),
    Divergence(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Check(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Divergence(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Check(m) => f.write_str(m),
            CliError::Divergence(m) => write!(f, "numerical divergence: {m}"),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Divergence(m) => CliError::Divergence(m),
            ModelError::Numerics(n @ NumericsError::Divergence { .. }) => CliError::Divergence(n.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Model(m) => m.into(),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "mcn", version, about = "Moment retrieval with moment context networks")]
struct Cli {
    /// `key = value` settings; flags override them.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads; 0 uses every core. Results do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a planted synthetic corpus.
    Synth(SynthArgs),
    /// Train a model and write the best-validation checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint or a baseline on one split.
    Eval(EvalArgs),
    /// Rank the moments of one video for a text query.
    Localize(LocalizeArgs),
    /// Annotation-only baselines: upper bound, chance, moment prior.
    Baseline(BaselineArgs),
    /// Finite-difference checks of every layer and the full loss.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub videos: Option<usize>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    #[arg(long)]
    pub test_fraction: Option<f64>,
    /// Feature dimension of each modality.
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub queries_per_video: Option<usize>,
    #[arg(long)]
    pub positional_rate: Option<f64>,
}

#[derive(Args)]
pub struct CorpusArgs {
    /// Directory in the synthetic layout (annotations.json, index.tsv, ...).
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub splits: Option<PathBuf>,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Annotation key aliases, `field=a,b;field=c`.
    #[arg(long)]
    pub aliases: Option<String>,
}

#[derive(Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub joint_dim: Option<usize>,
    #[arg(long)]
    pub visual_hidden: Option<usize>,
    #[arg(long)]
    pub lstm_hidden: Option<usize>,
    #[arg(long)]
    pub use_global: Option<bool>,
    #[arg(long)]
    pub use_tef: Option<bool>,
    /// `rgb`, `flow` or `rgb+flow`.
    #[arg(long)]
    pub modalities: Option<String>,
    #[arg(long)]
    pub language_free: Option<bool>,
    #[arg(long)]
    pub fine_tune_words: Option<bool>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Output checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Also write the epoch log here.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Epochs without validation improvement before stopping; 0 never stops.
    #[arg(long)]
    pub patience: Option<usize>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long, conflicts_with = "baseline")]
    pub checkpoint: Option<PathBuf>,
    /// `upper_bound`, `chance` or `prior`.
    #[arg(long)]
    pub baseline: Option<String>,
    /// `train`, `val` or `test`.
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write the full JSON report here.
    #[arg(long)]
    pub json: Option<PathBuf>,
    /// Write the table here as well as to stdout.
    #[arg(long)]
    pub table: Option<PathBuf>,
}

#[derive(Args)]
pub struct LocalizeArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub text: String,
    #[arg(long)]
    pub video: String,
    /// Feature index; defaults to `<data-dir>/index.tsv`.
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Segment count; defaults to whole segments in the feature file.
    #[arg(long)]
    pub segments: Option<usize>,
    /// Print only the best `k` moments.
    #[arg(long)]
    pub top: Option<usize>,
    /// Score sliding frame windows and print `(start_frame, distance)`.
    #[arg(long)]
    pub fine_grained: bool,
    /// Window length in frames; defaults to one segment.
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
}

#[derive(Args)]
pub struct BaselineArgs {
    #[arg(long)]
    pub train_annotations: Option<PathBuf>,
    #[arg(long)]
    pub eval_annotations: Option<PathBuf>,
    /// `upper_bound`, `chance`, `prior` or `all`.
    #[arg(long)]
    pub which: Option<String>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub aliases: Option<String>,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Args)]
pub struct GradcheckArgs {
    /// Random instances per check.
    #[arg(long)]
    pub instances: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[arg(long)]
    pub step: Option<f64>,
    #[arg(long)]
    pub json: Option<PathBuf>,
    /// Corrupt one check's analytic gradient (negative control).
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let settings = Settings::load(cli.config.as_deref())?;
    match cli.command {
        Command::Synth(a) => commands::synth(settings, a),
        Command::Train(a) => commands::train(settings, a),
        Command::Eval(a) => commands::eval(settings, a),
        Command::Localize(a) => commands::localize(settings, a),
        Command::Baseline(a) => commands::baseline(settings, a),
        Command::Gradcheck(a) => commands::gradcheck(settings, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let jobs = cli.jobs;
    match mcn::exec::with_jobs(jobs, || run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
