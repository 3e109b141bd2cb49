mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use smoe_core::model::FlopConvention;

/// Failure classes with their exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Bad arguments or configuration; exit code 2.
    Usage(String),
    /// Anything that failed while running; exit code 1.
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<smoe_core::Error> for CliError {
    fn from(e: smoe_core::Error) -> Self {
        match e {
            smoe_core::Error::Config(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.into()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

#[derive(Parser)]
#[command(name = "smoe", version, about = "Routed mixture-of-experts acoustic model experiments")]
struct Cli {
    /// Print reports as JSON instead of text.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from an experiment config.
    Train(TrainArgs),
    /// Score a checkpoint on a corpus.
    Eval(EvalArgs),
    /// Parameter and FLOP counts of a preset, without building it.
    Cost(CostArgs),
    /// Finite-difference gradient checks of every component.
    Gradcheck(GradcheckArgs),
    /// Per-layer routing statistics of a model on a corpus.
    RouteStats(RouteStatsArgs),
    /// Write a synthetic corpus as a feature file.
    Synth(SynthArgs),
}

#[derive(Args)]
pub struct TrainArgs {
    /// Experiment config (JSON).
    #[arg(short, long)]
    config: PathBuf,
    #[arg(long)]
    preset: Option<String>,
    /// Output directory.
    #[arg(short, long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    /// Override any config field, e.g. `--set train.weights.beta=0`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

/// Corpus input shared by eval and route-stats.
#[derive(Args)]
pub struct DataArgs {
    /// Feature file (`.smfe`) or manifest (`.jsonl`) of raw frames.
    #[arg(long)]
    data: PathBuf,
    /// Frames stacked per model input.
    #[arg(long, default_value_t = 8)]
    stack: usize,
    /// Subsampling rate.
    #[arg(long, default_value_t = 3)]
    rate: usize,
    /// Normalization statistics; defaults to `cmvn.json` beside the checkpoint.
    #[arg(long)]
    cmvn: Option<PathBuf>,
    /// Skip normalization.
    #[arg(long)]
    no_cmvn: bool,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
pub struct CostArgs {
    #[arg(long)]
    preset: String,
    #[arg(long, default_value = "mac1", value_parser = parse_convention)]
    flop_convention: FlopConvention,
    /// Audio duration the FLOPs are counted over.
    #[arg(long, default_value_t = 1.0)]
    seconds: f64,
}

fn parse_convention(s: &str) -> Result<FlopConvention, String> {
    s.parse().map_err(|e: smoe_core::Error| e.to_string())
}

#[derive(Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value = "desk-moe-4e")]
    preset: String,
    #[arg(long)]
    seed: Option<u64>,
    /// Coordinates probed per parameter tensor in the full-objective check.
    #[arg(long, default_value_t = 2)]
    coords: usize,
}

#[derive(Args)]
pub struct RouteStatsArgs {
    /// Trained model; without it a fresh model of `--preset` is used.
    #[arg(long, conflicts_with = "preset")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
pub struct SynthArgs {
    /// Output feature file.
    #[arg(short, long)]
    out: PathBuf,
    /// Also write a manifest of utterance offsets.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Corpus description (JSON); flags override its fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    utterances: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long)]
    vocab: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    conditions: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::Train(a) => commands::train(a, cli.json),
        Command::Eval(a) => commands::eval(a, cli.json),
        Command::Cost(a) => commands::cost(a, cli.json),
        Command::Gradcheck(a) => commands::gradcheck(a, cli.json),
        Command::RouteStats(a) => commands::route_stats(a, cli.json),
        Command::Synth(a) => commands::synth(a, cli.json),
    };
    match result {
        Ok(code) => code,
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
