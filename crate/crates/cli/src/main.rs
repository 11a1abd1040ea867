//! `tshift`: temporal deterioration and adaptation experiments from the
//! command line.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 trainer error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tshift_core::adaptation::AdaptationMethod;

#[derive(Debug, Parser)]
#[command(name = "tshift", version, about = "Temporal deterioration and adaptation evaluation grids")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Cut a corpus into equal-size temporal splits and write plan.json.
    Split(RunArgs),
    /// Generate a synthetic drifting corpus.
    Simulate(SimulateArgs),
    /// Train one model per (split, seed) and evaluate it on every later split.
    RunGrid(GridArgs),
    /// Fill adaptation grids and compare methods against gold retraining.
    Adapt(AdaptArgs),
    /// Summary scores and significance tests for a grid CSV.
    Summarize(SummarizeArgs),
    /// Lower-triangular text table of a grid CSV.
    RenderMatrix(RenderArgs),
}

/// Options shared by commands that read a corpus.
#[derive(Debug, Args)]
pub struct RunArgs {
    /// Run configuration (TOML); flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus in the line-delimited record format.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// span-f1, macro-f1 or class-f1:<label>.
    #[arg(long)]
    metric: Option<String>,
    #[arg(long)]
    periods_per_split: Option<usize>,
    /// Training seeds, comma separated.
    #[arg(long, alias = "seed", value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Seed of the split plan and the train/dev cut.
    #[arg(long)]
    split_seed: Option<u64>,
    /// builtin-classifier, builtin-tagger or external:<command line>.
    #[arg(long)]
    trainer: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = parse_alpha)]
    alpha: Option<f64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    decimals: Option<usize>,
    /// Truncate every record to this many tokens.
    #[arg(long)]
    max_tokens: Option<usize>,
    /// Trainer hyperparameter, repeatable.
    #[arg(long = "hparam", value_name = "KEY=VALUE", value_parser = parse_kv)]
    hparams: Vec<(String, String)>,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Discard an existing grid in the output directory instead of resuming.
    #[arg(long)]
    fresh: bool,
}

#[derive(Debug, Args)]
pub struct AdaptArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Methods, comma separated; defaults to gold, self-label and
    /// ft-pretrain-ft (skipped when the trainer cannot pre-train).
    #[arg(long, value_delimiter = ',', value_parser = parse_method)]
    method: Option<Vec<AdaptationMethod>>,
    /// Share of each target split that is pseudo-labelled, in (0, 1].
    #[arg(long, default_value_t = 1.0, value_parser = parse_fraction)]
    fraction: f64,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Drift configuration (flat TOML); flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_rate)]
    churn: Option<f64>,
    #[arg(long)]
    periods: Option<usize>,
    #[arg(long)]
    records_per_period: Option<usize>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SummarizeArgs {
    /// Grid CSV (train_split,test_split,seed,metric_value).
    #[arg(long)]
    grid: PathBuf,
    #[arg(long, default_value_t = 0.05, value_parser = parse_alpha)]
    alpha: f64,
    #[arg(long, default_value_t = 1)]
    decimals: usize,
    /// Directory for summary.csv and summary.md; defaults to the grid's.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    grid: PathBuf,
    #[arg(long, default_value_t = 1)]
    decimals: usize,
    /// Output file; defaults to matrix.md next to the grid.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_fraction(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
    tshift_core::adaptation::check_fraction(v).map_err(|e| e.to_string())?;
    Ok(v)
}

fn parse_alpha(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
    if v > 0.0 && v < 1.0 {
        Ok(v)
    } else {
        Err(format!("alpha {v} is outside (0, 1)"))
    }
}

fn parse_rate(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside [0, 1]"))
    }
}

fn parse_kv(s: &str) -> Result<(String, String), String> {
    match s.split_once('=') {
        Some((k, v)) if !k.is_empty() => Ok((k.to_string(), v.to_string())),
        _ => Err(format!("{s:?} is not KEY=VALUE")),
    }
}

fn parse_method(s: &str) -> Result<AdaptationMethod, String> {
    s.parse().map_err(|e: tshift_core::Error| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Split(a) => commands::split(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::RunGrid(a) => commands::run_grid(a),
        Command::Adapt(a) => commands::adapt(a),
        Command::Summarize(a) => commands::summarize(a),
        Command::RenderMatrix(a) => commands::render_matrix(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
