//! Byte-level BPE tokenizer, pretraining chunker and finetuning formatter.

mod corpus;
pub mod synthetic;
mod tokenizer;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use corpus::{read_documents, read_finetune, FinetuneExample};
pub use tokenizer::{pretokenize, Tokenizer, TrainedTokenizer};

pub mod special {
    /// End of document.
    pub const EOD: u32 = 256;
    pub const PAD: u32 = 257;
    /// Begin of target, the first decoder input of the encoder-decoder model.
    pub const BOT: u32 = 258;
    /// First id available to merges.
    pub const FIRST_MERGE: u32 = 259;
}

/// One training or evaluation sequence.
///
/// `tokens[..prefix_len]` is the input span and `tokens[prefix_len..]` the
/// target span. `loss_mask[t]` marks `tokens[t]` as a scored prediction.
/// Causal pretraining rows have `prefix_len == 0` and score every token
/// after the first.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Row {
    pub tokens: Vec<u32>,
    pub prefix_len: usize,
    pub loss_mask: Vec<bool>,
}

impl Row {
    pub fn causal(tokens: Vec<u32>) -> Self {
        let loss_mask = (0..tokens.len()).map(|t| t > 0).collect();
        Self { tokens, prefix_len: 0, loss_mask }
    }

    /// Input `tokens[..k]`, every later token scored.
    pub fn prefix(tokens: Vec<u32>, k: usize) -> Self {
        let loss_mask = (0..tokens.len()).map(|t| t >= k).collect();
        Self { tokens, prefix_len: k, loss_mask }
    }

    pub fn input_ids(&self) -> &[u32] {
        &self.tokens[..self.prefix_len]
    }

    pub fn target_ids(&self) -> &[u32] {
        &self.tokens[self.prefix_len..]
    }

    pub fn loss_tokens(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.loss_mask.len() != self.tokens.len() || self.prefix_len > self.tokens.len() {
            return Err(Error::Input("row mask or prefix does not match its tokens".into()));
        }
        if self.loss_tokens() == 0 {
            return Err(Error::AllMasked);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChunkMode {
    Causal,
    Prefix,
}

/// Concatenates tokenized documents separated by the end-of-document id and
/// cuts them into non-overlapping rows of `t` tokens. The trailing
/// remainder is dropped. Prefix mode splits each row in the middle.
pub fn chunk_pretrain<I, S>(documents: I, tokenizer: &Tokenizer, t: usize, mode: ChunkMode) -> Result<Vec<Row>>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut stream = Vec::new();
    let mut any = false;
    for doc in documents {
        any = true;
        stream.extend(tokenizer.encode(doc.as_ref()));
        stream.push(special::EOD);
    }
    if !any {
        return Err(Error::Input("empty document stream".into()));
    }
    chunk_tokens(&stream, t, mode)
}

/// Row cutting on an already tokenized stream.
pub fn chunk_tokens(stream: &[u32], t: usize, mode: ChunkMode) -> Result<Vec<Row>> {
    if t < 2 {
        return Err(Error::Config(format!("sequence length {t} is too short")));
    }
    if mode == ChunkMode::Prefix && !t.is_multiple_of(2) {
        return Err(Error::Config(format!("prefix mode needs an even sequence length, got {t}")));
    }
    Ok(stream
        .chunks_exact(t)
        .map(|c| match mode {
            ChunkMode::Causal => Row::causal(c.to_vec()),
            ChunkMode::Prefix => Row::prefix(c.to_vec(), t / 2),
        })
        .collect())
}

pub const MAX_INPUT_TOKENS: usize = 2048;
pub const MAX_TARGET_TOKENS: usize = 512;

/// Tokenizes one input/target pair, keeping the head of each span. The row
/// layout is the same for both architectures: the encoder-decoder feeds the
/// input span to its encoder, the decoder-only model reads the
/// concatenation. Only target tokens are scored.
pub fn format_finetune(example: &FinetuneExample, tokenizer: &Tokenizer, max_in: usize, max_out: usize) -> Result<Row> {
    let mut input = tokenizer.encode(&example.input);
    let mut target = tokenizer.encode(&example.target);
    input.truncate(max_in);
    target.truncate(max_out);
    if target.is_empty() {
        return Err(Error::Input("target is empty after truncation".into()));
    }
    if input.is_empty() {
        return Err(Error::Input("input is empty after truncation".into()));
    }
    let k = input.len();
    input.extend(target);
    Ok(Row::prefix(input, k))
}

#[cfg(test)]
mod tests;
