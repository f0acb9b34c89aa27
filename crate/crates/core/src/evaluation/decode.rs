use std::rc::Rc;

use crate::data::special::EOD;
use crate::error::{Error, Result};
use crate::models::{decode, encode, forward_decllm, Arch, Encoded, ForwardOptions, MaskKind, Model};
use crate::numerics::{Eager, Tensor};

/// Next-token logits given everything generated so far.
pub trait NextLogits {
    fn next_logits(&mut self, generated: &[u32]) -> Result<Vec<f64>>;
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in logits.iter().enumerate() {
        if x > logits[best] {
            best = i;
        }
    }
    best
}

/// Greedy loop until `stop` is produced (not included) or `max_new` tokens.
pub fn greedy_loop(source: &mut impl NextLogits, max_new: usize, stop: Option<u32>) -> Result<Vec<u32>> {
    let mut out = Vec::with_capacity(max_new);
    while out.len() < max_new {
        let next = argmax(&source.next_logits(&out)?) as u32;
        if Some(next) == stop {
            break;
        }
        out.push(next);
    }
    Ok(out)
}

enum State {
    Dec { prompt: Vec<u32> },
    Red { enc: Encoded<Rc<Tensor>> },
}

/// Model-backed logit source. The RedLLM encoder runs once per prompt.
pub struct ModelDecoder<'m> {
    model: &'m Model,
    ops: Eager,
    state: State,
}

impl<'m> ModelDecoder<'m> {
    pub fn new(model: &'m Model, prompt: &[u32]) -> Result<Self> {
        if prompt.is_empty() {
            return Err(Error::Input("empty prompt".into()));
        }
        let mut ops = Eager::new();
        let state = match model.cfg.arch {
            Arch::DecLLM => State::Dec { prompt: prompt.to_vec() },
            Arch::RedLLM => {
                let mut opts = ForwardOptions { extrapolate: true, ..Default::default() };
                State::Red { enc: encode(&mut ops, model, prompt, &mut opts)? }
            }
        };
        Ok(Self { model, ops, state })
    }
}

impl NextLogits for ModelDecoder<'_> {
    fn next_logits(&mut self, generated: &[u32]) -> Result<Vec<f64>> {
        let mut opts = ForwardOptions { extrapolate: true, ..Default::default() };
        let logits = match &self.state {
            State::Dec { prompt } => {
                let mut seq = prompt.clone();
                seq.extend_from_slice(generated);
                forward_decllm(&mut self.ops, self.model, &seq, MaskKind::Causal, &mut opts)?.logits
            }
            State::Red { enc } => {
                let mut seq = vec![self.model.cfg.bot_id];
                seq.extend_from_slice(generated);
                decode(&mut self.ops, self.model, enc, &seq, &mut opts)?.logits
            }
        };
        Ok(logits.row(logits.outer() - 1).to_vec())
    }
}

/// Greedy continuation of `prompt` (the encoder input for RedLLM). Stops at
/// the end-of-document id, which is not returned.
pub fn greedy_decode(model: &Model, prompt: &[u32], max_new: usize) -> Result<Vec<u32>> {
    greedy_loop(&mut ModelDecoder::new(model, prompt)?, max_new, Some(EOD))
}
