use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{AttentionKind, CapturedAttention};
use crate::numerics::Tensor;
use crate::training::checkpoint::{read_container, write_container, DType};

pub const LOCALITY_WINDOW: usize = 5;
pub const POOL_SIZE: usize = 128;

/// Row-major `[t_q x t_k]` attention weights.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnMatrix {
    pub t_q: usize,
    pub t_k: usize,
    pub data: Vec<f64>,
}

impl AttnMatrix {
    pub fn new(t_q: usize, t_k: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != t_q * t_k {
            return Err(Error::shape("attention matrix", format!("{} values for {t_q}x{t_k}", data.len())));
        }
        Ok(Self { t_q, t_k, data })
    }

    pub fn get(&self, q: usize, k: usize) -> f64 {
        self.data[q * self.t_k + k]
    }

    pub fn row(&self, q: usize) -> &[f64] {
        &self.data[q * self.t_k..(q + 1) * self.t_k]
    }

    pub fn total(&self) -> f64 {
        self.data.iter().sum()
    }
}

/// Mean over every capture of `kind` (layers and examples). Captures are
/// already head-averaged and layers have equal head counts, so this is the
/// mean over heads, layers and examples.
pub fn mean_attention(captures: &[CapturedAttention], kind: AttentionKind) -> Result<AttnMatrix> {
    let picked: Vec<_> = captures.iter().filter(|c| c.kind == kind).collect();
    let first = picked
        .first()
        .ok_or_else(|| Error::Input(format!("no captured {} attention (enable capture)", kind.tag())))?;
    let (t_q, t_k) = (first.t_q, first.t_k);
    if picked.iter().any(|c| c.t_q != t_q || c.t_k != t_k) {
        return Err(Error::shape("mean_attention", "captures have different shapes"));
    }
    let mut acc = vec![0.0; t_q * t_k];
    for c in &picked {
        acc.iter_mut().zip(&c.weights).for_each(|(a, &w)| *a += w as f64);
    }
    let n = picked.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    AttnMatrix::new(t_q, t_k, acc)
}

/// Attention mass each query `t` places on keys `[t - window + 1, t]`,
/// truncated at the start. Queries and keys share an index space.
pub fn locality_metric(attn: &AttnMatrix, window: usize) -> Result<Vec<f64>> {
    if window == 0 {
        return Err(Error::Input("locality window must be at least 1".into()));
    }
    if attn.t_q > attn.t_k {
        return Err(Error::shape("locality_metric", format!("{} queries over {} keys", attn.t_q, attn.t_k)));
    }
    Ok((0..attn.t_q)
        .map(|t| attn.row(t)[(t + 1).saturating_sub(window)..=t].iter().sum())
        .collect())
}

/// Mean-pooled attention grid. `pooled` is false when the input was smaller
/// than the requested size and is returned as-is.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PooledGrid {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    pub pooled: bool,
    pub note: Option<String>,
}

fn bounds(len: usize, out: usize, i: usize) -> (usize, usize) {
    (i * len / out, (i + 1) * len / out)
}

/// Strided mean pooling to `out_q x out_k` (queries on the y axis, keys on
/// x). Masked cells are zero and count toward their window's mean.
pub fn pool_attention(attn: &AttnMatrix, out_q: usize, out_k: usize) -> Result<PooledGrid> {
    if out_q == 0 || out_k == 0 {
        return Err(Error::Input("pool size must be positive".into()));
    }
    if attn.t_q < out_q || attn.t_k < out_k {
        return Ok(PooledGrid {
            rows: attn.t_q,
            cols: attn.t_k,
            data: attn.data.clone(),
            pooled: false,
            note: Some(format!("{}x{} is smaller than {out_q}x{out_k}; left unpooled", attn.t_q, attn.t_k)),
        });
    }
    let mut data = Vec::with_capacity(out_q * out_k);
    for i in 0..out_q {
        let (q0, q1) = bounds(attn.t_q, out_q, i);
        for j in 0..out_k {
            let (k0, k1) = bounds(attn.t_k, out_k, j);
            let sum: f64 = (q0..q1).map(|q| attn.row(q)[k0..k1].iter().sum::<f64>()).sum();
            data.push(sum / ((q1 - q0) * (k1 - k0)) as f64);
        }
    }
    Ok(PooledGrid { rows: out_q, cols: out_k, data, pooled: true, note: None })
}

/// Locality curve, pooled map and target log-prob curve of one analysis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionStats {
    pub kind: String,
    pub window: usize,
    pub locality: Vec<f64>,
    pub grid: PooledGrid,
    pub logprob: Vec<f64>,
}

/// Writes the pooled grid as a float32 tensor named `attention` in the
/// checkpoint container format.
pub fn write_attention_dump(dir: &Path, grid: &PooledGrid, meta: serde_json::Value) -> Result<()> {
    let t = Tensor::new(vec![grid.rows, grid.cols], grid.data.clone())?;
    let meta = serde_json::json!({ "pooled": grid.pooled, "note": grid.note, "info": meta });
    write_container(dir, DType::F32, &[("attention".to_string(), t)], meta)
}

pub fn read_attention_dump(dir: &Path) -> Result<AttnMatrix> {
    let (_, tensors) = read_container(dir)?;
    let (_, t) = tensors
        .into_iter()
        .find(|(n, _)| n == "attention")
        .ok_or_else(|| Error::Input(format!("{}: no attention tensor", dir.display())))?;
    let (r, c) = t.dims2("attention dump")?;
    AttnMatrix::new(r, c, t.into_data())
}
