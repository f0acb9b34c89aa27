use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{forward_decllm, forward_redllm, Arch, ForwardOptions, MaskKind, Model};
use crate::numerics::kernels::{target_inverse_probs, target_log_probs};
use crate::numerics::{Eager, Tensor};

/// One evaluation cell. Column order is the CSV schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub model: String,
    pub step: u64,
    pub params: u64,
    pub train_flops: f64,
    pub domain: String,
    pub context_len: usize,
    pub prefix_len: usize,
    /// Token-weighted mean negative log-likelihood over suffix tokens.
    pub nll: f64,
    pub ppl: f64,
    pub rows: usize,
}

pub const EVAL_HEADER: &str = "model,step,params,train_flops,domain,context_len,prefix_len,nll,ppl,rows";

/// Descriptive columns shared by every record of one evaluation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub model: String,
    pub step: u64,
    pub params: u64,
    pub train_flops: f64,
    pub domain: String,
}

/// Output of the scorer for a row split into `tokens[..k]` and `tokens[k..]`.
pub struct SuffixScore {
    /// `ln p(tokens[k + i] | ...)` for each suffix token.
    pub log_probs: Vec<f64>,
    /// `1 / p(tokens[k + i] | ...)`, without an exp/ln round trip.
    pub inverse_probs: Vec<f64>,
    pub logits: Rc<Tensor>,
}

/// Scores the suffix of one row. The decoder-only model runs causally over
/// the whole row and keeps the suffix positions; the encoder-decoder encodes
/// the prefix and decodes the suffix. Both go through the same log-prob
/// kernel.
pub fn score_suffix(model: &Model, tokens: &[u32], k: usize) -> Result<SuffixScore> {
    if k == 0 || k >= tokens.len() {
        return Err(Error::Input(format!("prefix length {k} must satisfy 0 < k < {}", tokens.len())));
    }
    let mut e = Eager::new();
    let mut opts = ForwardOptions { extrapolate: true, ..Default::default() };
    let (logits, targets) = match model.cfg.arch {
        Arch::DecLLM => {
            let out = forward_decllm(&mut e, model, &tokens[..tokens.len() - 1], MaskKind::Causal, &mut opts)?;
            let rows = out.logits.outer();
            let v = out.logits.last_dim();
            let suffix = crate::numerics::kernels::slice(&out.logits, k - 1..rows, 0..v)?;
            (Rc::new(suffix), &tokens[k..])
        }
        Arch::RedLLM => {
            let out = forward_redllm(&mut e, model, &tokens[..k], &tokens[k..], &mut opts)?;
            (out.logits, &tokens[k..])
        }
    };
    let log_probs = target_log_probs(&logits, targets)?;
    let inverse_probs = target_inverse_probs(&logits, targets)?;
    Ok(SuffixScore { log_probs, inverse_probs, logits })
}

/// Running total of suffix negative log-likelihoods. Values are stored as
/// deviations from the first one so that a set of equal values averages to
/// exactly that value. Perplexity is the first token's inverse probability
/// times `exp` of the mean deviation, so a uniform model scores exactly its
/// vocabulary size.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct NllTotal {
    reference: f64,
    reference_ppl: f64,
    deviation: f64,
    pub tokens: usize,
    pub rows: usize,
}

impl NllTotal {
    pub fn push(&mut self, nll: f64) {
        self.push_scored(nll, nll.exp());
    }

    /// `inverse_prob` is `1 / p` of the same token computed directly from
    /// the logits; it falls back to `exp(nll)` when not finite.
    pub fn push_scored(&mut self, nll: f64, inverse_prob: f64) {
        if self.tokens == 0 {
            self.reference = nll;
            self.reference_ppl = if inverse_prob.is_finite() { inverse_prob } else { nll.exp() };
        }
        self.deviation += nll - self.reference;
        self.tokens += 1;
    }

    pub fn sum(&self) -> f64 {
        self.reference * self.tokens as f64 + self.deviation
    }

    pub fn merge(self, other: Self) -> Self {
        if self.tokens == 0 {
            return Self { rows: self.rows + other.rows, ..other };
        }
        let shift = (other.reference - self.reference) * other.tokens as f64;
        Self {
            deviation: self.deviation + other.deviation + shift,
            tokens: self.tokens + other.tokens,
            rows: self.rows + other.rows,
            ..self
        }
    }

    pub fn mean(&self) -> f64 {
        self.reference + self.deviation / self.tokens as f64
    }

    pub fn ppl(&self) -> f64 {
        self.reference_ppl * (self.deviation / self.tokens as f64).exp()
    }
}

pub fn suffix_nll(model: &Model, rows: &[Vec<u32>], context_len: usize, k: usize) -> Result<NllTotal> {
    let mut total = NllTotal::default();
    for row in rows.iter().filter(|r| r.len() >= context_len) {
        let s = score_suffix(model, &row[..context_len], k)?;
        s.log_probs.iter().zip(&s.inverse_probs).for_each(|(lp, ip)| total.push_scored(-lp, *ip));
        total.rows += 1;
    }
    if total.rows == 0 {
        return Err(Error::Input(format!("no evaluation row has {context_len} tokens")));
    }
    Ok(total)
}

/// Perplexity of the last `context_len - k` tokens given the first `k`, over
/// every row with at least `context_len` tokens (longer rows are cut).
pub fn prefix_ppl(model: &Model, rows: &[Vec<u32>], context_len: usize, k: usize, meta: &RecordMeta) -> Result<EvalRecord> {
    let total = suffix_nll(model, rows, context_len, k)?;
    Ok(record(meta, context_len, k, total))
}

fn record(meta: &RecordMeta, context_len: usize, k: usize, total: NllTotal) -> EvalRecord {
    EvalRecord {
        model: meta.model.clone(),
        step: meta.step,
        params: meta.params,
        train_flops: meta.train_flops,
        domain: meta.domain.clone(),
        context_len,
        prefix_len: k,
        nll: total.mean(),
        ppl: total.ppl(),
        rows: total.rows,
    }
}

/// Prefix-LM perplexity over a `(k, T)` grid; cells with `k >= T` are
/// omitted. Rows shorter than a cell's length are skipped for that cell.
pub fn extrapolation_sweep(
    model: &Model,
    rows: &[Vec<u32>],
    prefix_lens: &[usize],
    context_lens: &[usize],
    meta: &RecordMeta,
) -> Result<Vec<EvalRecord>> {
    let mut out = Vec::new();
    for &t in context_lens {
        for &k in prefix_lens.iter().filter(|&&k| k < t) {
            out.push(prefix_ppl(model, rows, t, k, meta)?);
        }
    }
    Ok(out)
}

/// Mean suffix log-prob at each target position over equal-length rows.
pub fn per_position_logprob(model: &Model, rows: &[Vec<u32>], k: usize) -> Result<Vec<f64>> {
    let first = rows.first().ok_or_else(|| Error::Input("no rows".into()))?;
    if rows.iter().any(|r| r.len() != first.len()) {
        return Err(Error::Input("per-position curves need equal-length rows".into()));
    }
    let mut acc = vec![0.0; first.len().saturating_sub(k)];
    for row in rows {
        let s = score_suffix(model, row, k)?;
        acc.iter_mut().zip(&s.log_probs).for_each(|(a, l)| *a += l);
    }
    Ok(acc.into_iter().map(|a| a / rows.len() as f64).collect())
}

/// Arithmetic mean of per-domain perplexities (each token-weighted within
/// its domain).
pub fn mean_domain_ppl(records: &[EvalRecord]) -> Option<f64> {
    (!records.is_empty()).then(|| records.iter().map(|r| r.ppl).sum::<f64>() / records.len() as f64)
}

pub fn write_records(path: &std::path::Path, records: &[EvalRecord]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(EVAL_HEADER.split(','))?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records(path: &std::path::Path) -> Result<Vec<EvalRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != EVAL_HEADER {
        return Err(Error::Input(format!("{}: expected header {EVAL_HEADER}", path.display())));
    }
    r.deserialize().map(|x| x.map_err(Error::from)).collect()
}
