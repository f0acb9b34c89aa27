use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::special::{BOT, EOD, FIRST_MERGE, PAD};
use crate::error::{Error, Result};

/// Splits text into pre-token chunks: runs of non-whitespace carry one
/// leading space when present, remaining whitespace forms its own chunk.
/// Merges never cross chunk boundaries.
pub fn pretokenize(bytes: &[u8]) -> Vec<&[u8]> {
    let ws = |b: u8| b.is_ascii_whitespace();
    let mut chunks = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < bytes.len() {
        if i > start && ws(bytes[i]) != ws(bytes[i - 1]) {
            // Leave a single trailing space for the following word.
            let cut = if !ws(bytes[i]) && bytes[i - 1] == b' ' { i - 1 } else { i };
            if cut > start {
                chunks.push(&bytes[start..cut]);
            }
            start = cut;
        }
        i += 1;
    }
    if start < bytes.len() {
        chunks.push(&bytes[start..]);
    }
    chunks
}

/// Byte-level BPE. Ids 0..=255 are raw bytes, then the special ids, then
/// one id per merge in learned order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    merges: Vec<(u32, u32)>,
    pieces: Vec<Vec<u8>>,
    ranks: HashMap<(u32, u32), u32>,
}

/// Result of training: `truncated` is set when the corpus ran out of pairs
/// before the requested vocabulary size was reached.
#[derive(Clone, Debug)]
pub struct TrainedTokenizer {
    pub tokenizer: Tokenizer,
    pub requested_vocab: usize,
    pub truncated: bool,
}

fn special_name(id: u32) -> Option<&'static str> {
    match id {
        EOD => Some("[EOD]"),
        PAD => Some("[PAD]"),
        BOT => Some("[BOT]"),
        _ => None,
    }
}

impl Tokenizer {
    /// Rebuilds the vocabulary from an ordered merge list.
    pub fn from_merges(merges: Vec<(u32, u32)>) -> Result<Self> {
        let mut pieces: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        pieces.extend([EOD, PAD, BOT].iter().map(|_| Vec::new()));
        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, &(a, b)) in merges.iter().enumerate() {
            let next = pieces.len() as u32;
            for id in [a, b] {
                if id >= next || special_name(id).is_some() {
                    return Err(Error::Input(format!("merge {rank} uses invalid id {id}")));
                }
            }
            if ranks.insert((a, b), rank as u32).is_some() {
                return Err(Error::Input(format!("duplicate merge ({a}, {b})")));
            }
            let mut piece = pieces[a as usize].clone();
            piece.extend_from_slice(&pieces[b as usize]);
            pieces.push(piece);
        }
        Ok(Self { merges, pieces, ranks })
    }

    /// Learns merges greedily by weighted pair frequency. Ties go to the
    /// lexicographically smallest `(bytes_a, bytes_b)`.
    pub fn train<'a>(corpus: impl IntoIterator<Item = &'a str>, vocab_size: usize) -> Result<TrainedTokenizer> {
        let base = FIRST_MERGE as usize;
        if vocab_size <= base {
            return Err(Error::Config(format!("vocab size must exceed {base}")));
        }
        let mut counts: BTreeMap<&[u8], u64> = BTreeMap::new();
        for doc in corpus {
            for chunk in pretokenize(doc.as_bytes()) {
                *counts.entry(chunk).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::Input("empty tokenizer corpus".into()));
        }
        let mut words: Vec<(Vec<u32>, u64)> =
            counts.into_iter().map(|(w, c)| (w.iter().map(|&b| b as u32).collect(), c)).collect();

        let mut tok = Self::from_merges(Vec::new())?;
        while tok.vocab_size() < vocab_size {
            let mut pairs: HashMap<(u32, u32), u64> = HashMap::new();
            for (w, c) in &words {
                for p in w.windows(2) {
                    *pairs.entry((p[0], p[1])).or_default() += c;
                }
            }
            let best = pairs.into_iter().max_by(|(pa, ca), (pb, cb)| {
                ca.cmp(cb).then_with(|| {
                    let key = |p: &(u32, u32)| (tok.piece(p.0).to_vec(), tok.piece(p.1).to_vec());
                    key(pb).cmp(&key(pa))
                })
            });
            let Some(((a, b), _)) = best else { break };
            let new_id = tok.vocab_size() as u32;
            for (w, _) in words.iter_mut() {
                merge_in_place(w, a, b, new_id);
            }
            tok.ranks.insert((a, b), tok.merges.len() as u32);
            tok.merges.push((a, b));
            let mut piece = tok.pieces[a as usize].clone();
            piece.extend_from_slice(&tok.pieces[b as usize]);
            tok.pieces.push(piece);
        }
        let truncated = tok.vocab_size() < vocab_size;
        if truncated {
            log::warn!("corpus exhausted at {} of {vocab_size} tokens", tok.vocab_size());
        }
        Ok(TrainedTokenizer { tokenizer: tok, requested_vocab: vocab_size, truncated })
    }

    pub fn vocab_size(&self) -> usize {
        self.pieces.len()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    /// Raw bytes of a token (empty for special ids).
    pub fn piece(&self, id: u32) -> &[u8] {
        &self.pieces[id as usize]
    }

    pub fn encode_bytes(&self, bytes: &[u8]) -> Vec<u32> {
        let mut cache: HashMap<&[u8], Vec<u32>> = HashMap::new();
        let mut out = Vec::with_capacity(bytes.len());
        for chunk in pretokenize(bytes) {
            let ids = cache.entry(chunk).or_insert_with(|| self.encode_chunk(chunk));
            out.extend_from_slice(ids);
        }
        out
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        self.encode_bytes(text.as_bytes())
    }

    fn encode_chunk(&self, chunk: &[u8]) -> Vec<u32> {
        let mut ids: Vec<u32> = chunk.iter().map(|&b| b as u32).collect();
        loop {
            let best = ids
                .windows(2)
                .filter_map(|p| self.ranks.get(&(p[0], p[1])).map(|&r| (r, p[0], p[1])))
                .min();
            let Some((rank, a, b)) = best else { break };
            merge_in_place(&mut ids, a, b, FIRST_MERGE + rank);
        }
        ids
    }

    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            let piece = self
                .pieces
                .get(id as usize)
                .ok_or(Error::TokenOutOfRange { id, vocab: self.vocab_size() })?;
            out.extend_from_slice(piece);
        }
        Ok(out)
    }

    /// Lossy UTF-8 decode; special tokens render as nothing.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        Ok(String::from_utf8_lossy(&self.decode_bytes(ids)?).into_owned())
    }

    pub fn to_json(&self) -> Result<String> {
        let table = byte_to_unicode();
        let vocab = (0..self.vocab_size() as u32)
            .map(|id| match special_name(id) {
                Some(name) => name.to_string(),
                None => self.piece(id).iter().map(|&b| table[b as usize]).collect(),
            })
            .collect();
        let file = TokenizerFile {
            vocab,
            merges: self.merges.iter().map(|&(a, b)| [a, b]).collect(),
            special: Special { eod: EOD, pad: PAD, bot: BOT },
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: TokenizerFile = serde_json::from_str(text)?;
        if (file.special.eod, file.special.pad, file.special.bot) != (EOD, PAD, BOT) {
            return Err(Error::Input("unsupported special token layout".into()));
        }
        let tok = Self::from_merges(file.merges.iter().map(|m| (m[0], m[1])).collect())?;
        if file.vocab.len() != tok.vocab_size() {
            return Err(Error::Input(format!(
                "vocab lists {} entries but merges imply {}",
                file.vocab.len(),
                tok.vocab_size()
            )));
        }
        Ok(tok)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn merge_in_place(ids: &mut Vec<u32>, a: u32, b: u32, new_id: u32) {
    let mut out = 0;
    let mut i = 0;
    while i < ids.len() {
        if i + 1 < ids.len() && ids[i] == a && ids[i + 1] == b {
            ids[out] = new_id;
            i += 2;
        } else {
            ids[out] = ids[i];
            i += 1;
        }
        out += 1;
    }
    ids.truncate(out);
}

/// Printable stand-ins for raw bytes, so vocab strings stay readable JSON.
fn byte_to_unicode() -> Vec<char> {
    let printable = |b: u8| (b'!'..=b'~').contains(&b) || (0xA1..=0xAC).contains(&b) || b >= 0xAE;
    let mut shift = 0;
    (0..=255u8)
        .map(|b| {
            if printable(b) {
                char::from(b)
            } else {
                shift += 1;
                char::from_u32(255 + shift).expect("valid code point")
            }
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct Special {
    eod: u32,
    pad: u32,
    bot: u32,
}

#[derive(Serialize, Deserialize)]
struct TokenizerFile {
    vocab: Vec<String>,
    merges: Vec<[u32; 2]>,
    special: Special,
}
