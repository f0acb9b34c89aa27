//! Subcommand arguments. Every field is optional on the command line so that
//! a `--config` JSON object can supply it; flags given explicitly win.

use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizerTrainArgs {
    /// Text (blank-line separated documents) or JSONL files with a `text` field.
    #[arg(long, num_args = 1..)]
    pub input: Vec<PathBuf>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelArgs {
    /// Preset name such as `dec-desk` or `red-1B`.
    #[arg(long)]
    pub model: Option<String>,
    /// Model configuration JSON (overrides `--model`).
    #[arg(long)]
    pub model_config: Option<PathBuf>,
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimArgs {
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub z_loss: Option<f64>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// `f64` (bit-exact resume) or `f32`.
    #[arg(long)]
    pub checkpoint_dtype: Option<String>,
    /// Stop once a step's loss is below this value.
    #[arg(long)]
    pub stop_below: Option<f64>,
    /// Record elapsed seconds in the training log (makes it non-reproducible).
    #[arg(long)]
    pub wall_clock: bool,
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    #[arg(long, num_args = 1..)]
    pub data: Vec<PathBuf>,
    /// Sequence length; defaults to the model's maximum.
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    pub optim: OptimArgs,
    #[arg(long)]
    pub warmup: Option<u64>,
    #[arg(long)]
    pub peak_lr: Option<f64>,
    #[arg(long)]
    pub floor_ratio: Option<f64>,
    /// Continue from the latest checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneArgs {
    /// Pretrained checkpoint directory.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    /// JSONL files with `input` and `target` fields.
    #[arg(long, num_args = 1..)]
    pub data: Vec<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub optim: OptimArgs,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Decoder-only: attend bidirectionally over the input span.
    #[arg(long)]
    pub bidirectional: bool,
    #[arg(long)]
    pub max_input: Option<usize>,
    #[arg(long)]
    pub max_target: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct CheckpointSet {
    /// Checkpoint directories.
    #[arg(long, num_args = 1..)]
    pub checkpoint: Vec<PathBuf>,
    /// Run directories; every checkpoint inside is used.
    #[arg(long, num_args = 1..)]
    pub run: Vec<PathBuf>,
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalPplArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub checkpoints: CheckpointSet,
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    /// One file per domain; the domain tag is the file stem.
    #[arg(long, num_args = 1..)]
    pub data: Vec<PathBuf>,
    /// Row length; defaults to the model's maximum.
    #[arg(long)]
    pub context_len: Option<usize>,
    /// Defaults to half the context length.
    #[arg(long)]
    pub prefix_len: Option<usize>,
    #[arg(long)]
    pub max_rows: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtrapolateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub checkpoints: CheckpointSet,
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    #[arg(long, num_args = 1..)]
    pub data: Vec<PathBuf>,
    /// Comma-separated; defaults to 1, T/4, T/2 of the training length T.
    #[arg(long, value_delimiter = ',')]
    pub prefix_lens: Vec<usize>,
    /// Comma-separated; defaults to T, 2T, 4T, 8T.
    #[arg(long, value_delimiter = ',')]
    pub context_lens: Vec<usize>,
    #[arg(long)]
    pub max_rows: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalyzeAttentionArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    #[arg(long, num_args = 1..)]
    pub data: Vec<PathBuf>,
    #[arg(long)]
    pub context_len: Option<usize>,
    #[arg(long)]
    pub prefix_len: Option<usize>,
    /// Number of example rows averaged.
    #[arg(long)]
    pub rows: Option<usize>,
    /// Local window size (keys `t - window + 1 ..= t`).
    #[arg(long)]
    pub window: Option<usize>,
    /// Pooled map side length.
    #[arg(long)]
    pub pool: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    /// Prompt text; may be repeated.
    #[arg(long, num_args = 1..)]
    pub prompt: Vec<String>,
    /// JSONL file with an `input` field per line.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub max_new: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct FitScalingArgs {
    /// Evaluation CSV files.
    #[arg(long, num_args = 1..)]
    pub records: Vec<PathBuf>,
    /// `flops` or `params`.
    #[arg(long)]
    pub covariate: Option<String>,
    /// Fit per `arch` (default) or per `model` tag.
    #[arg(long)]
    pub group: Option<String>,
    /// Include an irreducible term.
    #[arg(long)]
    pub irreducible: bool,
    #[arg(long)]
    pub domain: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct IsoflopArgs {
    #[arg(long, num_args = 1..)]
    pub records: Vec<PathBuf>,
    /// Comma-separated FLOPs budgets; defaults to five log-spaced budgets
    /// across the observed range.
    #[arg(long, value_delimiter = ',')]
    pub budgets: Vec<f64>,
    #[arg(long)]
    pub irreducible: bool,
    #[arg(long)]
    pub domain: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct FrontierArgs {
    #[arg(long, num_args = 1..)]
    pub records: Vec<PathBuf>,
    #[arg(long)]
    pub domain: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct FlopsArgs {
    /// Preset name.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    /// Sequence length for a full (decoder-only) sequence.
    #[arg(long)]
    pub seq: Option<usize>,
    /// Input/target split; both default to half of `--seq`.
    #[arg(long)]
    pub prefix: Option<usize>,
    #[arg(long)]
    pub target: Option<usize>,
    /// `train` or `infer`.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}
