use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "alope", version, about = "Layer-aware regression heads for translation quality estimation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one head strategy and write a checkpoint.
    Train(TrainArgs),
    /// Train one vanilla head per layer and tabulate test Spearman.
    Sweep(SweepArgs),
    /// Per-pair Spearman and Pearson for a prediction file.
    Eval(EvalArgs),
    /// Williams test between two prediction files.
    Compare(CompareArgs),
    /// Write final-token embeddings of a dataset to an embedding dump.
    ExportEmbeddings(ExportArgs),
    /// Generate seeded synthetic datasets or planted-signal dumps.
    GenSynth(GenSynthArgs),
    /// Re-execute the command recorded in a manifest.
    Rerun(RerunArgs),
}

/// Settings shared by `train` and `sweep`. Precedence: defaults, config file,
/// `--set`, then the dedicated flags.
#[derive(Debug, Clone, Args)]
pub struct SettingsArgs {
    /// key = value config file (default: $ALOPE_CONFIG when set)
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override any config key, e.g. `--set lora_rank=8`
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long = "lr")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub optimizer: Option<String>,
    #[arg(long)]
    pub lora_rank: Option<usize>,
    #[arg(long)]
    pub normalization: Option<String>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Train heads only; the backbone stays frozen and gets no adapters.
    #[arg(long)]
    pub frozen_backbone: bool,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub settings: SettingsArgs,
    #[arg(long)]
    pub strategy: Option<String>,
    /// Comma-separated layer indices, e.g. `-1,-7`
    #[arg(long, allow_hyphen_values = true)]
    pub layers: Option<String>,
    /// Training TSV (live backbone)
    #[arg(long, conflicts_with = "dump", required_unless_present = "dump")]
    pub data: Option<PathBuf>,
    /// Training embedding dump (frozen path)
    #[arg(long)]
    pub dump: Option<PathBuf>,
    /// Validation TSV or dump, matching the training input
    #[arg(long)]
    pub valid: Option<PathBuf>,
    /// Backbone checkpoint to start from instead of a fresh model
    #[arg(long, conflicts_with = "dump")]
    pub base: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub settings: SettingsArgs,
    /// Layers to sweep (default: -1,-7,-11,-16,-20,-24)
    #[arg(long, allow_hyphen_values = true)]
    pub layers: Option<String>,
    /// Training input: TSV, or an embedding dump with --dumps
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    /// Treat --train and --test as embedding dumps
    #[arg(long)]
    pub dumps: bool,
    #[arg(long, conflicts_with = "dumps")]
    pub base: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Prediction TSV: pair_id, index, prediction, reference
    #[arg(long)]
    pub predictions: PathBuf,
    /// Dataset TSV whose scores replace the reference column, row for row
    #[arg(long)]
    pub references: Option<PathBuf>,
    #[arg(long)]
    pub score_min: Option<f64>,
    #[arg(long)]
    pub score_max: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TailsArg {
    One,
    Two,
}

#[derive(Debug, Clone, Args)]
pub struct CompareArgs {
    /// First prediction file (metric 1)
    #[arg(long)]
    pub a: PathBuf,
    /// Second prediction file (metric 2)
    #[arg(long)]
    pub b: PathBuf,
    /// Dataset TSV whose scores replace the reference columns, row for row
    #[arg(long)]
    pub references: Option<PathBuf>,
    #[arg(long)]
    pub score_min: Option<f64>,
    #[arg(long)]
    pub score_max: Option<f64>,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long, value_enum, default_value_t = TailsArg::One)]
    pub tails: TailsArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ExportArgs {
    /// Trained run directory (`<train --out>/model`) or a backbone checkpoint file
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, allow_hyphen_values = true)]
    pub layers: String,
    #[arg(long)]
    pub score_min: Option<f64>,
    #[arg(long)]
    pub score_max: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SynthKind {
    Qe,
    Planted,
}

#[derive(Debug, Clone, Args)]
pub struct GenSynthArgs {
    #[arg(long, value_enum, default_value_t = SynthKind::Qe)]
    pub kind: SynthKind,
    /// Training rows
    #[arg(long, default_value_t = 7000)]
    pub n: usize,
    /// Test rows (none written when 0)
    #[arg(long, default_value_t = 0)]
    pub n_test: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Comma-separated pair ids (default: eight pairs)
    #[arg(long)]
    pub pairs: Option<String>,
    /// Absolute layer carrying the planted signal
    #[arg(long, default_value_t = 5)]
    pub signal_layer: usize,
    #[arg(long, default_value_t = 8)]
    pub model_layers: usize,
    #[arg(long, default_value_t = 16)]
    pub hidden: usize,
    #[arg(long, default_value_t = 0.3)]
    pub sigma: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct RerunArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Write to this directory instead of the recorded one
    #[arg(long)]
    pub out: Option<PathBuf>,
}
