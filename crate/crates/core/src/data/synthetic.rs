//! Small generated corpora for desk-scale runs and tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::special::EOD;
use super::Row;

/// A short passage that desk models can memorise.
pub const PASSAGE: &str = "The quick brown fox jumps over the lazy dog while the careful cat watches from a sunny window. \
Rivers carry small stones to the sea, and every stone remembers the mountain it came from. \
Seven bright lanterns hang above the quiet harbour where old boats rest until morning.";

/// `documents` copies of the passage, each repeated `repeats` times.
pub fn repeated_text(documents: usize, repeats: usize) -> Vec<String> {
    vec![PASSAGE.repeat(repeats); documents]
}

/// Uniform random sequences over ids `0..alphabet`.
pub fn random_sequences(seed: u64, n: usize, len: usize, alphabet: u32) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..len).map(|_| rng.gen_range(0..alphabet)).collect()).collect()
}

/// Copy task: the input is the sequence, the target is the sequence followed
/// by the end-of-document id.
pub fn copy_rows(sequences: &[Vec<u32>]) -> Vec<Row> {
    sequences
        .iter()
        .map(|s| {
            let mut tokens = s.clone();
            tokens.extend_from_slice(s);
            tokens.push(EOD);
            Row::prefix(tokens, s.len())
        })
        .collect()
}
