use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use synct_core::net::Variant;
use synct_core::phantom::Inconsistency;

#[derive(Debug, Parser)]
#[command(name = "synct", version = crate::VERSION, about = "Structure-aware MR-to-CT synthesis on pelvic phantoms")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Procedural phantom datasets.
    #[command(subcommand)]
    Phantom(PhantomCommand),
    /// Train one model variant.
    Train(TrainArgs),
    /// Write synthetic CTs and predicted labels for a dataset.
    Infer(InferArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Train and score several variants over several seeds.
    Ablate(AblateArgs),
    /// Re-emit tables from saved report files.
    Report(ReportArgs),
}

#[derive(Debug, Subcommand)]
pub enum PhantomCommand {
    /// Generate a dataset of paired MR/CT phantom slices.
    Generate(GenerateArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// none, bladder, gas, both or random.
    #[arg(long, default_value = "random", value_parser = parse_mode)]
    pub mode: Inconsistency,
    #[arg(long, env = "SYNCT_OUT")]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

fn parse_mode(s: &str) -> Result<Inconsistency, String> {
    s.parse()
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse()
}

/// Flags shared by commands that train; each overrides the config file.
#[derive(Debug, Args, Clone)]
pub struct TrainOverrides {
    /// TOML training config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub base_channels: Option<usize>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub fold: Option<usize>,
    #[arg(long)]
    pub no_augment: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: TrainOverrides,
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<Variant>,
    #[arg(long, env = "SYNCT_DATA")]
    pub data: Option<PathBuf>,
    #[arg(long, env = "SYNCT_OUT")]
    pub out: Option<PathBuf>,
    /// Continue from this checkpoint; the output directory may already exist.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    All,
    Train,
    Test,
}

/// Dataset selection for commands that read a trained model.
#[derive(Debug, Args)]
pub struct DataSelection {
    /// Checkpoint file, or a run directory holding `last.ckpt`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, env = "SYNCT_DATA")]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    pub split: Split,
    /// Defaults to the value in the run's config.
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub fold: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[command(flatten)]
    pub select: DataSelection,
    #[arg(long, env = "SYNCT_OUT")]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub select: DataSelection,
    /// Defaults to `report.json` beside the checkpoint.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Directory for comparison panels.
    #[arg(long)]
    pub plots: Option<PathBuf>,
    /// Print the report as JSON instead of a table.
    #[arg(long)]
    pub json: bool,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: TrainOverrides,
    #[arg(long, value_delimiter = ',', value_parser = parse_variant,
          default_value = "full,cgan,wo_seg,wo_adaon,wo_lexc")]
    pub variants: Vec<Variant>,
    /// Number of seeds, counted up from the base seed.
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    #[arg(long, env = "SYNCT_DATA")]
    pub data: PathBuf,
    /// Separate test dataset; otherwise the held-out fold of `--data`.
    #[arg(long)]
    pub test_data: Option<PathBuf>,
    #[arg(long, env = "SYNCT_OUT")]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Report files, each holding one report or an array of them.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long, env = "SYNCT_OUT")]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}
