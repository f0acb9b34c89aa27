//! Transformer building blocks: pre-norm RMSNorm, rotary embeddings,
//! Q/K/V-normalised multi-head attention (optionally output-normalised),
//! SwiGLU feed-forward and tied embeddings.

mod attention;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Ops, ParamId, Params};

pub use attention::{attention, AttentionOutput, AttentionParams};

/// Rotary embedding settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RotaryConfig {
    pub base: f64,
    pub head_dim: usize,
}

impl RotaryConfig {
    pub const DEFAULT_BASE: f64 = 10_000.0;

    pub fn new(head_dim: usize) -> Result<Self> {
        let cfg = Self { base: Self::DEFAULT_BASE, head_dim };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_dim == 0 || !self.head_dim.is_multiple_of(2) {
            return Err(Error::Config(format!("rotary needs an even head dim, got {}", self.head_dim)));
        }
        if self.base <= 1.0 {
            return Err(Error::Config(format!("rotary base must exceed 1, got {}", self.base)));
        }
        Ok(())
    }

    /// `base^(-2i/head_dim)` for each dimension pair.
    pub fn frequencies(&self) -> Vec<f64> {
        crate::numerics::kernels::rotary_inv_freq(self.head_dim, self.base)
    }
}

/// RMS normalisation over the last axis; `gain == None` is the parameter-free form.
pub fn rmsnorm<O: Ops>(ops: &mut O, x: &O::V, gain: Option<&O::V>) -> Result<O::V> {
    let d = ops.value(x).last_dim();
    ops.rmsnorm(x, gain, d)
}

/// Rotates a `[T x d_h]` (or `[T x h*d_h]`) block by per-row positions.
pub fn rotary_apply<O: Ops>(ops: &mut O, x: &O::V, positions: &[usize], cfg: &RotaryConfig) -> Result<O::V> {
    cfg.validate()?;
    ops.rotary(x, positions, cfg.head_dim, cfg.base)
}

/// Gated feed-forward weights; all stored `[in x out]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SwiGluParams {
    pub w_in: ParamId,
    pub w_gate: ParamId,
    pub w_out: ParamId,
}

/// `W_out(silu(x W_gate) * (x W_in))`.
pub fn swiglu_ffn<O: Ops>(ops: &mut O, params: &Params, p: &SwiGluParams, x: &O::V) -> Result<O::V> {
    let w_in = ops.param(params, p.w_in);
    let w_gate = ops.param(params, p.w_gate);
    let w_out = ops.param(params, p.w_out);
    let gate = ops.matmul(x, &w_gate)?;
    let gate = ops.silu(&gate)?;
    let lin = ops.matmul(x, &w_in)?;
    let h = ops.mul(&gate, &lin)?;
    ops.matmul(&h, &w_out)
}

/// Row lookup into the shared `[V x d]` embedding.
pub fn tied_embed<O: Ops>(ops: &mut O, params: &Params, table: ParamId, tokens: &[u32]) -> Result<O::V> {
    let e = ops.param(params, table);
    ops.gather_rows(&e, tokens)
}

/// `hidden * E^T` with the same shared embedding.
pub fn tied_unembed<O: Ops>(ops: &mut O, params: &Params, table: ParamId, hidden: &O::V) -> Result<O::V> {
    let e = ops.param(params, table);
    ops.matmul_nt(hidden, &e, 1.0)
}
