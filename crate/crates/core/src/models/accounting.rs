use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Arch, ModelConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub total: u64,
    /// The single tied `[V x d]` matrix.
    pub embedding: u64,
    pub non_embedding: u64,
}

/// Exact count of what [`Model::new`](super::Model::new) allocates.
pub fn count_params(cfg: &ModelConfig) -> ParamCount {
    let (d, w, f) = (cfg.d as u64, cfg.attn_width() as u64, cfg.d_ffn as u64);
    let attention = 4 * d * w;
    let ffn = 3 * d * f;
    let self_block = attention + ffn + 2 * d;
    let cross_block = attention + d;
    let embedding = cfg.vocab_size as u64 * d;
    let non_embedding = match cfg.arch {
        Arch::DecLLM => cfg.decoder_layers() as u64 * self_block + d,
        Arch::RedLLM => {
            cfg.encoder_layers() as u64 * self_block
                + cfg.decoder_layers() as u64 * (self_block + cross_block)
                + 2 * d
        }
    };
    ParamCount { total: embedding + non_embedding, embedding, non_embedding }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlopsMode {
    Train,
    Infer,
}

/// Sequence shape for accounting: a plain length, or prefix/target split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeqShape {
    Full(usize),
    Split { prefix: usize, target: usize },
}

impl SeqShape {
    pub fn total(&self) -> usize {
        match *self {
            SeqShape::Full(t) => t,
            SeqShape::Split { prefix, target } => prefix + target,
        }
    }
}

/// Forward FLOPs by component (before the train multiplier).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FlopsBreakdown {
    pub projections: f64,
    pub attention_scores: f64,
    pub attention_context: f64,
    pub ffn: f64,
    pub unembed: f64,
    pub multiplier: f64,
}

impl FlopsBreakdown {
    pub fn forward(&self) -> f64 {
        self.projections + self.attention_scores + self.attention_context + self.ffn + self.unembed
    }

    pub fn total(&self) -> f64 {
        self.forward() * self.multiplier
    }
}

fn mm(m: f64, k: f64, n: f64) -> f64 {
    2.0 * m * k * n
}

/// Matmul-dominated estimate, `2mkn` per product. Causal self-attention
/// counts the `T^2/2` participating pairs; full and cross attention count
/// every pair. Training is three forward passes.
pub fn flops_breakdown(cfg: &ModelConfig, shape: SeqShape, mode: FlopsMode) -> Result<FlopsBreakdown> {
    let (d, w, f, v) = (cfg.d as f64, cfg.attn_width() as f64, cfg.d_ffn as f64, cfg.vocab_size as f64);
    let multiplier = match mode {
        FlopsMode::Train => 3.0,
        FlopsMode::Infer => 1.0,
    };
    let mut b = FlopsBreakdown { multiplier, ..Default::default() };
    match cfg.arch {
        Arch::DecLLM => {
            let t = shape.total() as f64;
            if t == 0.0 {
                return Err(Error::Input("empty sequence".into()));
            }
            let l = cfg.decoder_layers() as f64;
            b.projections = l * (mm(t, d, 3.0 * w) + mm(t, w, d));
            b.attention_scores = l * mm(t, w, t) / 2.0;
            b.attention_context = l * mm(t, t, w) / 2.0;
            b.ffn = l * 3.0 * mm(t, d, f);
            b.unembed = mm(t, d, v);
        }
        Arch::RedLLM => {
            let SeqShape::Split { prefix, target } = shape else {
                return Err(Error::Input("RedLLM accounting needs a prefix/target split".into()));
            };
            if prefix == 0 || target == 0 {
                return Err(Error::Input("prefix and target must be non-empty".into()));
            }
            let (k, n) = (prefix as f64, target as f64);
            let le = cfg.encoder_layers() as f64;
            let ld = cfg.decoder_layers() as f64;
            b.projections = le * (mm(k, d, 3.0 * w) + mm(k, w, d))
                + ld * (mm(n, d, 3.0 * w) + mm(n, w, d))
                + ld * (mm(n, d, w) + mm(k, d, 2.0 * w) + mm(n, w, d));
            b.attention_scores = le * mm(k, w, k) + ld * (mm(n, w, n) / 2.0 + mm(n, w, k));
            b.attention_context = le * mm(k, k, w) + ld * (mm(n, n, w) / 2.0 + mm(n, k, w));
            b.ffn = (le * k + ld * n) * 3.0 * 2.0 * d * f;
            b.unembed = mm(n, d, v);
        }
    }
    Ok(b)
}

pub fn flops_per_sequence(cfg: &ModelConfig, shape: SeqShape, mode: FlopsMode) -> Result<f64> {
    Ok(flops_breakdown(cfg, shape, mode)?.total())
}
