//! `evolvex`: generate data, train, evaluate, forecast, prompt and serve.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use evolvex_core::fusion::FusionStrategy;

#[derive(Parser, Debug)]
#[command(name = "evolvex", version, about = "Forecast how users and their connections evolve")]
pub struct Cli {
    /// JSON config merged under the flags. Defaults to $EVOLVEX_CONFIG, then ./evolvex.json.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic temporal network.
    Generate(GenerateArgs),
    /// Train a model on the observed steps of a dataset.
    Train(TrainArgs),
    /// Score a checkpoint on the held-out steps.
    Eval(EvalArgs),
    /// Write the stage-by-stage forecast.
    Forecast(ForecastArgs),
    /// Build prompts, or score a completion provider on the held-out steps.
    Prompt(PromptArgs),
    /// Serve forecasts over HTTP.
    Serve(ServeArgs),
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub users: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub homophily: Option<f64>,
    #[arg(long)]
    pub closure: Option<f64>,
    #[arg(long)]
    pub drift: Option<f64>,
    #[arg(long)]
    pub directed: bool,
    /// Final steps marked as held out.
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long, short, default_value = "dataset.json")]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    Concat,
    Attention,
    Crossmodal,
}

impl From<StrategyArg> for FusionStrategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Concat => FusionStrategy::Concat,
            StrategyArg::Attention => FusionStrategy::Attention,
            StrategyArg::Crossmodal => FusionStrategy::CrossModal,
        }
    }
}

/// Named `(link, activity)` loss weightings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// 0.5 / 0.5
    Balanced,
    /// 0.4 / 0.6
    ActivityLeaning,
    /// 0.3 / 0.7
    ActivityHeavy,
}

impl Preset {
    pub fn weights(self) -> (f64, f64) {
        match self {
            Preset::Balanced => (0.5, 0.5),
            Preset::ActivityLeaning => (0.4, 0.6),
            Preset::ActivityHeavy => (0.3, 0.7),
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, short)]
    pub dataset: PathBuf,
    #[arg(long, value_enum)]
    pub strategy: Option<StrategyArg>,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Link-loss weight.
    #[arg(long)]
    pub lambda1: Option<f64>,
    /// Activity-loss weight.
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, short, default_value = "checkpoint.json")]
    pub out: PathBuf,
    /// Per-epoch losses. Defaults to `<out>` with a `.loss.json` suffix.
    #[arg(long)]
    pub loss_trace: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long, short)]
    pub dataset: PathBuf,
    #[arg(long, short)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, short, default_value = "report.json")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ForecastArgs {
    #[arg(long, short)]
    pub dataset: PathBuf,
    #[arg(long, short)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Condition on every step instead of stopping before the held-out ones.
    #[arg(long)]
    pub all_steps: bool,
    #[arg(long, short, default_value = "forecast.json")]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ProviderArg {
    Stub,
    Http,
}

#[derive(Args, Debug)]
pub struct PromptArgs {
    #[arg(long, short)]
    pub dataset: PathBuf,
    #[arg(long, value_enum, default_value = "stub")]
    pub provider: ProviderArg,
    #[arg(long)]
    pub llm_url: Option<String>,
    #[arg(long)]
    pub llm_model: Option<String>,
    /// Print the prompt for this user instead of scoring.
    #[arg(long)]
    pub user: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub stage: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long, short)]
    pub dataset: PathBuf,
    #[arg(long, short)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Directory of static UI assets served beside the API.
    #[arg(long = "static")]
    pub static_dir: Option<PathBuf>,
}

/// Exit 2 for usage and configuration problems, 1 for everything else.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
