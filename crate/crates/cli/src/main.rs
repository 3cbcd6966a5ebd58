use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use icgdm::dataset::Source;
use icgdm::schedule::ScheduleKind;
use icgdm::Exec;

mod commands;
mod config;
mod scenarios;

use commands::Failure;

#[derive(Debug, Parser)]
#[command(name = "icgdm", version, about = "Conditional diffusion scenario generation for PV and wind power")]
struct Cli {
    /// Run every data-parallel loop on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,

    /// Log progress (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model on an hourly forecast/actual CSV.
    Train(TrainArgs),
    /// Generate scenarios for one day-ahead forecast.
    Sample(SampleArgs),
    /// Score a scenario file against the realized day.
    Eval(EvalArgs),
    /// Dump a noise schedule as CSV.
    Schedule(ScheduleArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// CSV with timestamp,forecast_mw,actual_mw.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub source: Option<Source>,
    #[arg(long)]
    pub schedule: Option<ScheduleKind>,
    /// Diffusion steps T.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Trailing days held out from training.
    #[arg(long)]
    pub test_days: Option<usize>,
    /// `key = value` config file; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    /// 24-row CSV with timestamp,forecast_mw.
    #[arg(long)]
    pub forecast: PathBuf,
    /// Number of scenarios.
    #[arg(long)]
    pub num: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Reject the model if it was trained on a different source.
    #[arg(long)]
    pub source: Option<Source>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Scenario CSV written by `sample`.
    #[arg(long)]
    pub scenarios: PathBuf,
    /// 24-row CSV with timestamp,forecast_mw,actual_mw.
    #[arg(long)]
    pub actual: PathBuf,
    /// Comma-separated confidence levels in percent.
    #[arg(long)]
    pub levels: Option<String>,
    /// Checkpoint whose normalizer puts AED in normalized units.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Linear,
    Cosine,
    Both,
}

#[derive(Debug, Args)]
pub struct ScheduleArgs {
    #[arg(long, value_enum, default_value_t = KindArg::Both)]
    pub kind: KindArg,
    #[arg(long, default_value_t = 250)]
    pub steps: usize,
    #[arg(long, default_value_t = icgdm::schedule::DEFAULT_BETA_START)]
    pub beta_start: f64,
    #[arg(long, default_value_t = icgdm::schedule::DEFAULT_BETA_END)]
    pub beta_end: f64,
    /// Cosine offset s.
    #[arg(long, default_value_t = icgdm::schedule::DEFAULT_COSINE_OFFSET)]
    pub offset: f64,
    #[arg(long, default_value_t = icgdm::schedule::DEFAULT_BETA_MAX)]
    pub beta_max: f64,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let exec = if cli.sequential { Exec::Sequential } else { Exec::default() };
    let result = match &cli.command {
        Command::Train(a) => commands::train(a, exec),
        Command::Sample(a) => commands::sample(a, exec),
        Command::Eval(a) => commands::eval(a),
        Command::Schedule(a) => commands::schedule(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure { code, error }) => {
            eprintln!("error: {error:#}");
            ExitCode::from(code)
        }
    }
}
