//! `msdformer`: synthetic data, embedding, training, evaluation and the
//! attention benchmark.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "msdformer",
    version,
    about = "Split-window spammer detection on long behavior sequences"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labelled synthetic dataset (JSON lines) and its manifest.
    Synth(SynthArgs),
    /// Precompute the embedding cache for a dataset.
    Embed(EmbedArgs),
    /// Train a model and evaluate it on the held-out test split.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Benchmark full attention against split-window attention.
    BenchAttn(BenchArgs),
    /// Print a checkpoint's configuration, sections and shape pipeline.
    Inspect(InspectArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    pub users: usize,
    /// Mean history length.
    #[arg(long, default_value_t = 64)]
    pub l_mean: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value_t = msd_core::data::EMBED_DIM)]
    pub dim: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct ModelFlags {
    /// B, M, L or custom (custom takes `model.custom` from the config file).
    #[arg(long)]
    pub variant: Option<msd_core::config::Variant>,
    /// Behaviors per standardized sequence.
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Run configuration (canonical JSON); flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Embedding cache written by `embed`.
    #[arg(long)]
    pub cache: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: u64,
    #[command(flatten)]
    pub model: ModelFlags,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub accumulate: Option<usize>,
    /// Repeat training with consecutive seeds and report mean ± std.
    #[arg(long)]
    pub runs: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitSel {
    All,
    Train,
    Validation,
    Test,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// Which part of the seeded split to score.
    #[arg(long, value_enum, default_value_t = SplitSel::All)]
    pub split: SplitSel,
    /// Split seed; required unless `--split all`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also measure seconds per user.
    #[arg(long)]
    pub spu: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Behavior sizes, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub sizes: Option<Vec<usize>>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    /// Skip the full-attention baseline.
    #[arg(long)]
    pub no_baseline: bool,
    /// Score-storage budget in bytes.
    #[arg(long)]
    pub budget_bytes: Option<u64>,
    #[arg(long)]
    pub repeats: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct InspectArgs {
    #[arg(long, conflicts_with_all = ["variant", "seq_len"])]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub variant: Option<msd_core::config::Variant>,
    #[arg(long)]
    pub seq_len: Option<usize>,
    /// Print JSON instead of text.
    #[arg(long)]
    pub json: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Embed(a) => commands::embed(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::BenchAttn(a) => commands::bench_attn(a),
        Command::Inspect(a) => commands::inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
