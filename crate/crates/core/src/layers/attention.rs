use crate::error::{Error, Result};
use crate::layers::RotaryConfig;
use crate::numerics::{Ops, ParamId, Params};

/// Projection weights of one attention block. `wq/wk/wv` are `[d x h*d_h]`,
/// `wo` is `[h*d_h x d]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
    pub head_dim: usize,
    /// Normalise each head's output before the output projection.
    pub output_norm: bool,
}

impl AttentionParams {
    pub fn validate(&self, params: &Params) -> Result<()> {
        if !self.head_dim.is_multiple_of(2) {
            return Err(Error::Config(format!("head dim {} must be even", self.head_dim)));
        }
        let width = self.heads * self.head_dim;
        for id in [self.wq, self.wk, self.wv] {
            if params.get(id).shape().get(1) != Some(&width) {
                return Err(Error::Config(format!("{} must have {width} columns", params.name(id))));
            }
        }
        if params.get(self.wo).shape().first() != Some(&width) {
            return Err(Error::Config(format!("{} must have {width} rows", params.name(self.wo))));
        }
        Ok(())
    }
}

pub struct AttentionOutput<V> {
    pub out: V,
    /// Largest |pre-mask logit| seen in any head.
    pub max_abs_logit: f64,
    /// Head-averaged attention weights `[T_q x T_k]`, when requested.
    pub weights: Option<Vec<f32>>,
}

/// Multi-head attention with parameter-free RMSNorm on Q, K and V over each
/// head, rotary positions on Q and K (applied after the norm), and an optional
/// per-head output norm.
///
/// `visible` is a row-major `[T_q x T_k]` mask (`None` = attend everywhere).
#[allow(clippy::too_many_arguments)]
pub fn attention<O: Ops>(
    ops: &mut O,
    params: &Params,
    p: &AttentionParams,
    rotary: &RotaryConfig,
    x_q: &O::V,
    x_kv: &O::V,
    q_positions: &[usize],
    k_positions: &[usize],
    visible: Option<&[bool]>,
    capture: bool,
) -> Result<AttentionOutput<O::V>> {
    let (hd, heads) = (p.head_dim, p.heads);
    if rotary.head_dim != hd {
        return Err(Error::Config(format!("rotary head dim {} vs attention {hd}", rotary.head_dim)));
    }
    let t_q = ops.value(x_q).outer();
    let t_k = ops.value(x_kv).outer();
    if q_positions.len() != t_q || k_positions.len() != t_k {
        return Err(Error::shape("attention", "positions do not match sequence lengths"));
    }
    if let Some(m) = visible {
        if m.len() != t_q * t_k {
            return Err(Error::shape("attention", format!("mask {} for {t_q}x{t_k}", m.len())));
        }
    }

    let wq = ops.param(params, p.wq);
    let wk = ops.param(params, p.wk);
    let wv = ops.param(params, p.wv);
    let wo = ops.param(params, p.wo);

    let q = ops.matmul(x_q, &wq)?;
    let k = ops.matmul(x_kv, &wk)?;
    let v = ops.matmul(x_kv, &wv)?;
    let q = ops.rmsnorm(&q, None, hd)?;
    let k = ops.rmsnorm(&k, None, hd)?;
    let v = ops.rmsnorm(&v, None, hd)?;
    let q = ops.rotary(&q, q_positions, hd, rotary.base)?;
    let k = ops.rotary(&k, k_positions, hd, rotary.base)?;

    let scale = 1.0 / (hd as f64).sqrt();
    let mut max_abs_logit: f64 = 0.0;
    let mut weights = capture.then(|| vec![0.0f64; t_q * t_k]);
    let mut contexts = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = h * hd..(h + 1) * hd;
        let qh = ops.slice(&q, 0..t_q, cols.clone())?;
        let kh = ops.slice(&k, 0..t_k, cols.clone())?;
        let vh = ops.slice(&v, 0..t_k, cols)?;
        let logits = ops.matmul_nt(&qh, &kh, scale)?;
        max_abs_logit = ops.value(&logits).data().iter().fold(max_abs_logit, |m, l| m.max(l.abs()));
        let probs = ops.masked_softmax(&logits, visible)?;
        if let Some(w) = weights.as_mut() {
            w.iter_mut().zip(ops.value(&probs).data()).for_each(|(a, b)| *a += b);
        }
        contexts.push(ops.matmul(&probs, &vh)?);
    }
    let ctx = ops.concat_cols(&contexts)?;
    let ctx = if p.output_norm { ops.rmsnorm(&ctx, None, hd)? } else { ctx };
    let out = ops.matmul(&ctx, &wo)?;
    let weights = weights.map(|w| w.into_iter().map(|x| (x / heads as f64) as f32).collect());
    Ok(AttentionOutput { out, max_abs_logit, weights })
}
