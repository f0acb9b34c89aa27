//! DecLLM and RedLLM stacks, attention masks, and parameter/FLOPs accounting.

mod accounting;
mod config;
mod mask;
mod model;

pub use accounting::{count_params, flops_breakdown, flops_per_sequence, FlopsBreakdown, FlopsMode, ParamCount, SeqShape};
pub use config::{Arch, Layers, ModelConfig, DEFAULT_BOT_ID, DEFAULT_ROTARY_BASE};
pub use mask::{AttentionMask, MaskKind};
pub use model::{
    decode, encode, forward_decllm, forward_redllm, AttentionKind, CapturedAttention, Dropout, Encoded,
    ForwardOptions, ForwardOutput, Model, Positions,
};
