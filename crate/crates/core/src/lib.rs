//! Desk-scale laboratory comparing encoder-decoder (RedLLM, prefix LM) and
//! decoder-only (DecLLM, causal LM) transformer language models.
//!
//! ```text
//! numerics   tensors + reverse-mode autodiff
//! layers     RMSNorm, rotary, normalised attention, SwiGLU, tied embeddings
//! models     DecLLM / RedLLM stacks, masks, parameter and FLOPs accounting
//! data       byte-level BPE, pretraining chunker, finetune formatting
//! training   LM loss + z-loss, Adafactor, schedule, clipping, trainer, checkpoints
//! evaluation prefix PPL, extrapolation, locality, pooled attention, greedy decoding
//! scaling    power-law fits, compute-optimal frontier, isoFLOP slices
//! ```

pub mod data;
pub mod error;
pub mod evaluation;
pub mod layers;
pub mod models;
pub mod numerics;
pub mod scaling;
pub mod training;

pub use error::{Error, Result};
