//! `vizecg`: synthetic data, rendering, training, evaluation and image-only inference.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{parse_prevalence, parse_size, Toggle};

#[derive(Debug, Parser)]
#[command(name = "vizecg", version, about = "Multi-modal ECG classifier with image-only inference")]
pub struct Cli {
    /// TOML config file, or a run manifest to reproduce. Flags take precedence over it.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic 12-lead dataset.
    GenData(GenDataArgs),
    /// Render records as PGM images.
    Render(RenderArgs),
    /// Train both streams jointly.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Classify one PGM image.
    Infer(InferArgs),
    /// Finite-difference check of every op and of the tiny model.
    Gradcheck(GradcheckArgs),
    /// Train all four attention settings over several seeds.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Samples per lead.
    #[arg(long)]
    pub length: Option<usize>,
    /// Per-class prevalence override, e.g. `af=1.0`; repeatable.
    #[arg(long, value_name = "CLASS=P", value_parser = parse_prevalence)]
    pub prevalence: Vec<(usize, f64)>,
    #[arg(long)]
    pub co_occurrence: Option<f64>,
    #[arg(long)]
    pub noise_mv: Option<f64>,
}

#[derive(Debug, Args)]
pub struct RasterArgs {
    #[arg(long)]
    pub grid: Option<Toggle>,
    /// Raster size, `WIDTHxHEIGHT`.
    #[arg(long, value_parser = parse_size)]
    pub size: Option<(usize, usize)>,
    #[arg(long)]
    pub thickness: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// VZEC dataset.
    #[arg(long, conflicts_with = "csv", required_unless_present = "csv")]
    pub data: Option<PathBuf>,
    /// Single record as a 12-column CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Render only this record of the dataset.
    #[arg(long)]
    pub index: Option<usize>,
    /// Output `.pgm` for a single record, otherwise a directory.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub raster: RasterArgs,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub split_seed: Option<u64>,
    /// Train/val/test fractions, e.g. `0.8,0,0.2`.
    #[arg(long, value_name = "TRAIN,VAL,TEST")]
    pub split: Option<String>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr_max: Option<f64>,
    #[arg(long)]
    pub lr_min: Option<f64>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    /// Seeds initialization and shuffling.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Stop distillation gradients from reaching the signal stream.
    #[arg(long)]
    pub detach_teacher: bool,
    #[command(flatten)]
    pub split: SplitArgs,
    #[command(flatten)]
    pub raster: RasterArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Directory for the checkpoint, log and manifest.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub no_cmam: bool,
    #[arg(long)]
    pub no_smam: bool,
    #[command(flatten)]
    pub fit: FitArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ModeArg {
    Signal,
    Image,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitName {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "image")]
    pub mode: ModeArg,
    #[arg(long = "on", value_enum, default_value = "test")]
    pub on: SplitName,
    /// Metrics CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub split: SplitArgs,
    #[arg(long)]
    pub grid: Option<Toggle>,
    #[arg(long)]
    pub thickness: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// PGM raster; no signal input is accepted.
    #[arg(long)]
    pub image: PathBuf,
    /// Also write the probabilities as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Relative-error tolerance for single ops.
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    /// Relative-error tolerance for the end-to-end tiny model.
    #[arg(long, default_value_t = 1e-4)]
    pub model_tol: f64,
    /// Number of seeds, starting at 0.
    #[arg(long, default_value_t = 10)]
    pub seeds: u64,
    /// Report CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    /// Ablation table CSV.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub fit: FitArgs,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
