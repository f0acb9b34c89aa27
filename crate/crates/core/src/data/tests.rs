use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

const FIXTURE: &str = include_str!("../../tests/fixtures/bpe_fixture.txt");

/// Independent chunking: maximal whitespace / non-whitespace runs, with a
/// single trailing space moved onto the following word.
fn oracle_chunks(text: &[u8]) -> Vec<Vec<u8>> {
    let mut runs: Vec<Vec<u8>> = Vec::new();
    for &b in text {
        match runs.last_mut() {
            Some(r) if r[0].is_ascii_whitespace() == b.is_ascii_whitespace() => r.push(b),
            _ => runs.push(vec![b]),
        }
    }
    let mut out: Vec<Vec<u8>> = Vec::new();
    for run in runs {
        let prev_space = out.last().is_some_and(|p: &Vec<u8>| p.last() == Some(&b' ') && p[0].is_ascii_whitespace());
        if !run[0].is_ascii_whitespace() && prev_space {
            let prev = out.last_mut().unwrap();
            prev.pop();
            let mut word = vec![b' '];
            word.extend(run);
            if prev.is_empty() {
                out.pop();
            }
            out.push(word);
        } else {
            out.push(run);
        }
    }
    out
}

type Pair = (Vec<u8>, Vec<u8>);

/// Brute-force BPE over byte strings: recount every pair each round, take the
/// highest count, smallest pair on ties.
fn oracle_merges(text: &str, n_merges: usize) -> Vec<Pair> {
    let mut words: Vec<Vec<Vec<u8>>> =
        oracle_chunks(text.as_bytes()).into_iter().map(|w| w.into_iter().map(|b| vec![b]).collect()).collect();
    let mut merges = Vec::new();
    while merges.len() < n_merges {
        let mut counts: BTreeMap<Pair, u64> = BTreeMap::new();
        for w in &words {
            for i in 1..w.len() {
                *counts.entry((w[i - 1].clone(), w[i].clone())).or_default() += 1;
            }
        }
        let mut best: Option<(&Pair, u64)> = None;
        for (pair, &c) in &counts {
            if best.is_none_or(|(_, bc)| c > bc) {
                best = Some((pair, c));
            }
        }
        let Some((pair, _)) = best else { break };
        let pair = pair.clone();
        for w in words.iter_mut() {
            let mut out: Vec<Vec<u8>> = Vec::new();
            let mut i = 0;
            while i < w.len() {
                if i + 1 < w.len() && w[i] == pair.0 && w[i + 1] == pair.1 {
                    out.push([pair.0.clone(), pair.1.clone()].concat());
                    i += 2;
                } else {
                    out.push(w[i].clone());
                    i += 1;
                }
            }
            *w = out;
        }
        merges.push(pair);
    }
    merges
}

#[test]
fn chunks_agree_with_oracle() {
    for text in [FIXTURE, "a  b", " x", "x ", "\n\n a\tb  ", ""] {
        let ours: Vec<Vec<u8>> = pretokenize(text.as_bytes()).into_iter().map(<[u8]>::to_vec).collect();
        assert_eq!(ours, oracle_chunks(text.as_bytes()), "{text:?}");
    }
}

#[test]
fn merges_match_brute_force_on_fixture() {
    let trained = Tokenizer::train([FIXTURE], 259 + 120).unwrap();
    assert!(!trained.truncated);
    let tok = trained.tokenizer;
    let ours: Vec<(Vec<u8>, Vec<u8>)> =
        tok.merges().iter().map(|&(a, b)| (tok.piece(a).to_vec(), tok.piece(b).to_vec())).collect();
    assert_eq!(ours, oracle_merges(FIXTURE, 120));
}

#[test]
fn single_pair_corpus_merges_that_pair_first() {
    let trained = Tokenizer::train(["aaaaaaaa"], 260).unwrap();
    let tok = trained.tokenizer;
    assert_eq!(tok.merges()[0], (b'a' as u32, b'a' as u32));
    assert_eq!(tok.vocab_size(), 260);
}

#[test]
fn small_corpus_reports_truncation() {
    let trained = Tokenizer::train(["ab"], 300).unwrap();
    assert!(trained.truncated);
    assert_eq!(trained.tokenizer.vocab_size(), 260);
    assert!(Tokenizer::train(["ab"], 259).is_err());
    assert!(Tokenizer::train(Vec::<&str>::new(), 300).is_err());
}

#[test]
fn merges_never_produce_special_ids() {
    let tok = Tokenizer::train([FIXTURE], 400).unwrap().tokenizer;
    for &(a, b) in tok.merges() {
        for id in [a, b] {
            assert!(!(special::EOD..special::FIRST_MERGE).contains(&id));
        }
    }
    let ids = tok.encode(FIXTURE);
    assert!(ids.iter().all(|id| !(special::EOD..special::FIRST_MERGE).contains(id)));
    assert!(ids.len() < FIXTURE.len() / 2);
}

#[test]
fn round_trip_on_random_byte_strings() {
    let tok = Tokenizer::train([FIXTURE], 400).unwrap().tokenizer;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..1000 {
        let n = rng.gen_range(0..64);
        let bytes: Vec<u8> = (0..n).map(|_| rng.gen()).collect();
        assert_eq!(tok.decode_bytes(&tok.encode_bytes(&bytes)).unwrap(), bytes);
    }
}

proptest! {
    #[test]
    fn round_trip_on_arbitrary_text(s in ".{0,80}") {
        let tok = Tokenizer::train([FIXTURE], 320).unwrap().tokenizer;
        prop_assert_eq!(tok.decode(&tok.encode(&s)).unwrap(), s);
    }
}

#[test]
fn json_round_trip() {
    let tok = Tokenizer::train([FIXTURE], 350).unwrap().tokenizer;
    let text = tok.to_json().unwrap();
    let back = Tokenizer::from_json(&text).unwrap();
    assert_eq!(back, tok);
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["vocab"].as_array().unwrap().len(), 350);
    assert_eq!(v["vocab"][256], "[EOD]");
    assert_eq!(v["vocab"][b'a' as usize], "a");
    assert_eq!(v["merges"].as_array().unwrap().len(), 91);
}

#[test]
fn chunker_arithmetic() {
    // Byte-only tokenizer: one token per byte.
    let tok = Tokenizer::from_merges(Vec::new()).unwrap();
    let d1 = "a".repeat(1000);
    let d2 = "b".repeat(1100);
    let rows = chunk_pretrain([&d1, &d2], &tok, 2048, ChunkMode::Causal).unwrap();
    assert_eq!(rows.len(), 1);
    let r = &rows[0].tokens;
    assert!(r[..1000].iter().all(|&t| t == b'a' as u32));
    assert_eq!(r[1000], special::EOD);
    assert!(r[1001..].iter().all(|&t| t == b'b' as u32));
    assert_eq!(rows[0].loss_tokens(), 2047);
}

#[test]
fn prefix_rows_split_in_the_middle() {
    let tok = Tokenizer::from_merges(Vec::new()).unwrap();
    let docs: Vec<String> = (0..7).map(|i| "xyz".repeat(300 + 50 * i)).collect();
    let rows = chunk_pretrain(&docs, &tok, 2048, ChunkMode::Prefix).unwrap();
    assert!(!rows.is_empty());
    for r in &rows {
        assert_eq!(r.prefix_len, 1024);
        assert_eq!(r.input_ids().len(), 1024);
        assert_eq!(r.target_ids().len(), 1024);
        assert_eq!(r.loss_tokens(), 1024);
    }
    assert!(chunk_tokens(&[1, 2, 3], 3, ChunkMode::Prefix).is_err());
    assert!(chunk_pretrain(Vec::<String>::new(), &tok, 8, ChunkMode::Causal).is_err());
}

proptest! {
    #[test]
    fn chunker_conserves_tokens(len in 0usize..500, t in 2usize..40) {
        let stream: Vec<u32> = (0..len as u32).collect();
        let rows = chunk_tokens(&stream, t, ChunkMode::Causal).unwrap();
        let emitted = rows.len() * t;
        prop_assert!(emitted <= len);
        prop_assert!(len - emitted < t);
        let flat: Vec<u32> = rows.iter().flat_map(|r| r.tokens.clone()).collect();
        prop_assert_eq!(&flat[..], &stream[..emitted]);
    }
}

#[test]
fn finetune_truncates_heads_and_masks_target() {
    let tok = Tokenizer::from_merges(Vec::new()).unwrap();
    let ex = FinetuneExample { input: "i".repeat(3000), target: "abc".into() };
    let row = format_finetune(&ex, &tok, MAX_INPUT_TOKENS, MAX_TARGET_TOKENS).unwrap();
    assert_eq!(row.prefix_len, 2048);
    assert_eq!(row.loss_tokens(), 3);
    assert_eq!(row.target_ids(), &[b'a' as u32, b'b' as u32, b'c' as u32]);
    assert!(row.loss_mask[..2048].iter().all(|m| !m));
    assert!(row.loss_mask[2048..].iter().all(|&m| m));

    let long = FinetuneExample { input: "q".into(), target: (0..600).map(|i| if i < 512 { 'h' } else { 't' }).collect() };
    let row = format_finetune(&long, &tok, MAX_INPUT_TOKENS, MAX_TARGET_TOKENS).unwrap();
    assert_eq!(row.target_ids().len(), 512);
    assert!(row.target_ids().iter().all(|&t| t == b'h' as u32));

    let empty = FinetuneExample { input: "q".into(), target: String::new() };
    assert!(format_finetune(&empty, &tok, 10, 10).is_err());
    let cut = FinetuneExample { input: "q".into(), target: "x".into() };
    assert!(format_finetune(&cut, &tok, 10, 0).is_err());
}

#[test]
fn corpus_readers() {
    let dir = tempfile::tempdir().unwrap();
    let txt = dir.path().join("c.txt");
    std::fs::write(&txt, "one\ntwo\n\n\nthree\n").unwrap();
    assert_eq!(read_documents(&txt).unwrap(), vec!["one\ntwo".to_string(), "three".to_string()]);
    let jl = dir.path().join("c.jsonl");
    std::fs::write(&jl, "{\"text\":\"a\"}\n\n{\"text\":\"b\"}\n").unwrap();
    assert_eq!(read_documents(&jl).unwrap(), vec!["a", "b"]);
    let ft = dir.path().join("f.jsonl");
    std::fs::write(&ft, "{\"input\":\"x\",\"target\":\"y\"}\n").unwrap();
    assert_eq!(read_finetune(&ft).unwrap()[0].target, "y");
    std::fs::write(&ft, "{\"input\":\"x\"}\n").unwrap();
    assert!(read_finetune(&ft).is_err());
}
