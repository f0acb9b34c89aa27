use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::models::{forward_decllm, forward_redllm, Arch, AttentionKind, ForwardOptions, MaskKind, Model, ModelConfig};
use crate::numerics::kernels::target_log_probs;
use crate::numerics::{Eager, Tensor};

fn tiny(arch: Arch) -> ModelConfig {
    let mut cfg = ModelConfig::preset(if arch == Arch::DecLLM { "dec-tiny" } else { "red-tiny" }).unwrap();
    cfg.vocab_size = 16;
    cfg.bot_id = 15;
    cfg.max_seq = 16;
    cfg
}

fn live_model(arch: Arch, seed: u64) -> Model {
    let mut m = Model::new(tiny(arch), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let id = m.final_norm();
    m.params.set_data(id, (0..m.cfg.d).map(|_| rng.gen_range(0.5..1.5)).collect()).unwrap();
    m
}

fn rows(n: usize, len: usize, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..len).map(|_| rng.gen_range(0..15)).collect()).collect()
}

/// Log-softmax of one row, computed directly.
fn oracle_log_prob(row: &[f64], target: u32) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
    row[target as usize] - m - z.ln()
}

#[test]
fn untrained_models_score_exactly_vocab_size() {
    for arch in [Arch::DecLLM, Arch::RedLLM] {
        let m = Model::new(tiny(arch), 3).unwrap();
        let r = prefix_ppl(&m, &rows(3, 12, 1), 12, 6, &RecordMeta::default()).unwrap();
        assert_eq!(r.nll, (16f64).ln(), "{arch:?}");
        assert_eq!(r.ppl, 16.0, "{arch:?}");
        assert_eq!(r.rows, 3);
        let curve = per_position_logprob(&m, &rows(2, 12, 2), 6).unwrap();
        assert!(curve.iter().all(|&c| c == -(16f64).ln()));
    }
    // exp(ln 300) is not 300 in f64; the inverse-probability anchor is.
    assert_ne!((300f64).ln().exp(), 300.0);
    for arch in [Arch::DecLLM, Arch::RedLLM] {
        let mut cfg = tiny(arch);
        cfg.vocab_size = 300;
        cfg.bot_id = 299;
        let m = Model::new(cfg, 4).unwrap();
        let r = prefix_ppl(&m, &rows(2, 10, 3), 10, 4, &RecordMeta::default()).unwrap();
        assert_eq!((r.nll, r.ppl), ((300f64).ln(), 300.0), "{arch:?}");
    }
}

#[test]
fn inverse_probabilities_match_the_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let data: Vec<f64> = (0..5 * 7).map(|_| rng.gen_range(-30.0..30.0)).collect();
    let logits = Tensor::new(vec![5, 7], data).unwrap();
    let targets = [0, 3, 6, 2, 2];
    let inv = crate::numerics::kernels::target_inverse_probs(&logits, &targets).unwrap();
    for (i, &t) in targets.iter().enumerate() {
        let oracle = (-oracle_log_prob(logits.row(i), t)).exp();
        assert!((inv[i] / oracle - 1.0).abs() < 1e-12, "{} vs {oracle}", inv[i]);
    }
    assert!(crate::numerics::kernels::target_inverse_probs(&logits, &[0, 0, 0, 0, 7]).is_err());

    let mut total = NllTotal::default();
    total.push_scored(2.0, f64::INFINITY);
    assert_eq!(total.ppl(), 2f64.exp());
}

#[test]
fn perplexity_is_the_inverse_geometric_mean_probability() {
    let probs = [0.5, 0.25, 0.125];
    let logits = Tensor::from_rows(&[
        vec![0.5f64.ln(), 0.5f64.ln()],
        vec![0.25f64.ln(), 0.75f64.ln()],
        vec![0.125f64.ln(), 0.875f64.ln()],
    ]);
    let lp = target_log_probs(&logits, &[0, 0, 0]).unwrap();
    let mut total = NllTotal::default();
    lp.iter().for_each(|l| total.push(-l));
    let oracle = 1.0 / probs.iter().product::<f64>().powf(1.0 / 3.0);
    assert!((total.ppl() - oracle).abs() < 1e-12);
    assert!((total.ppl() - 4.0).abs() < 1e-12);
}

#[test]
fn decllm_prefix_scoring_is_the_causal_score_restricted_to_the_suffix() {
    let m = live_model(Arch::DecLLM, 4);
    let row = &rows(1, 12, 5)[0];
    let mut e = Eager::new();
    let full = forward_decllm(&mut e, &m, &row[..11], MaskKind::Causal, &mut ForwardOptions::default()).unwrap();
    let all = target_log_probs(&full.logits, &row[1..]).unwrap();
    for k in 1..12 {
        let s = score_suffix(&m, row, k).unwrap();
        assert_eq!(s.log_probs, all[k - 1..].to_vec(), "k={k}");
    }
}

#[test]
fn redllm_scores_the_suffix_through_its_decoder() {
    let m = live_model(Arch::RedLLM, 6);
    let row = &rows(1, 10, 7)[0];
    let s = score_suffix(&m, row, 4).unwrap();
    let mut e = Eager::new();
    let out = forward_redllm(&mut e, &m, &row[..4], &row[4..], &mut ForwardOptions::default()).unwrap();
    for (i, &lp) in s.log_probs.iter().enumerate() {
        assert!((lp - oracle_log_prob(out.logits.row(i), row[4 + i])).abs() < 1e-12);
    }
}

#[test]
fn prefix_ppl_ignores_row_order_and_partitioning() {
    let m = live_model(Arch::RedLLM, 8);
    let data = rows(6, 10, 9);
    let whole = suffix_nll(&m, &data, 10, 5).unwrap();
    let mut rev = data.clone();
    rev.reverse();
    let reversed = suffix_nll(&m, &rev, 10, 5).unwrap();
    let split = suffix_nll(&m, &data[..2], 10, 5).unwrap().merge(suffix_nll(&m, &data[2..], 10, 5).unwrap());
    for other in [reversed, split] {
        assert_eq!(other.tokens, whole.tokens);
        assert!((other.mean() - whole.mean()).abs() < 1e-12);
        assert!((other.ppl() / whole.ppl() - 1.0).abs() < 1e-12);
    }
    let r = prefix_ppl(&m, &data, 10, 5, &RecordMeta::default()).unwrap();
    assert!((r.ppl / r.nll.exp() - 1.0).abs() < 1e-12);
}

#[test]
fn empty_or_too_short_eval_sets_are_errors() {
    let m = live_model(Arch::DecLLM, 1);
    assert!(prefix_ppl(&m, &[], 8, 4, &RecordMeta::default()).is_err());
    assert!(prefix_ppl(&m, &rows(2, 6, 1), 8, 4, &RecordMeta::default()).is_err());
    assert!(score_suffix(&m, &rows(1, 6, 1)[0], 0).is_err());
    assert!(score_suffix(&m, &rows(1, 6, 1)[0], 6).is_err());
}

#[test]
fn sweep_cells_match_prefix_ppl_and_skip_short_rows() {
    let m = live_model(Arch::RedLLM, 10);
    let mut data = rows(3, 32, 11);
    data.push(rows(1, 12, 12).remove(0));
    let meta = RecordMeta { model: "red".into(), domain: "synthetic".into(), ..Default::default() };
    let cells = extrapolation_sweep(&m, &data, &[1, 8, 16], &[12, 24, 32], &meta).unwrap();
    // k=16 is dropped at T=12.
    assert_eq!(cells.len(), 8);
    let at_train = prefix_ppl(&m, &data, 16, 8, &meta);
    assert!(at_train.is_ok());
    for c in &cells {
        assert_eq!(*c, prefix_ppl(&m, &data, c.context_len, c.prefix_len, &meta).unwrap());
        assert_eq!(c.rows, if c.context_len <= 12 { 4 } else { 3 });
        assert!(c.prefix_len < c.context_len);
    }
    // Beyond max_seq (16) the model extrapolates instead of failing.
    assert!(cells.iter().any(|c| c.context_len == 32 && c.prefix_len == 1 && c.ppl.is_finite()));
    assert!(extrapolation_sweep(&m, &data, &[1], &[64], &meta).is_err());
}

#[test]
fn per_position_curves_are_row_means() {
    let m = live_model(Arch::DecLLM, 13);
    let data = rows(2, 10, 14);
    let single = per_position_logprob(&m, &data[..1], 3).unwrap();
    assert_eq!(single, score_suffix(&m, &data[0], 3).unwrap().log_probs);
    let other = per_position_logprob(&m, &data[1..], 3).unwrap();
    let both = per_position_logprob(&m, &data, 3).unwrap();
    for i in 0..both.len() {
        assert!((both[i] - 0.5 * (single[i] + other[i])).abs() < 1e-12);
    }
    assert!(per_position_logprob(&m, &[data[0].clone(), data[1][..9].to_vec()], 3).is_err());
}

fn uniform_causal(t: usize) -> AttnMatrix {
    let mut data = vec![0.0; t * t];
    for q in 0..t {
        for k in 0..=q {
            data[q * t + k] = 1.0 / (q + 1) as f64;
        }
    }
    AttnMatrix::new(t, t, data).unwrap()
}

#[test]
fn locality_of_uniform_causal_attention_has_a_closed_form() {
    let curve = locality_metric(&uniform_causal(300), LOCALITY_WINDOW).unwrap();
    assert_eq!(curve[0], 1.0);
    for (t, &c) in curve.iter().enumerate() {
        let oracle = (5.min(t + 1)) as f64 / (t + 1) as f64;
        assert!((c - oracle).abs() < 1e-10, "t={t}");
    }
}

#[test]
fn locality_of_identity_attention_is_one() {
    let t = 20;
    let data = (0..t * t).map(|i| if i / t == i % t { 1.0 } else { 0.0 }).collect();
    let curve = locality_metric(&AttnMatrix::new(t, t, data).unwrap(), 5).unwrap();
    assert!(curve.iter().all(|&c| c == 1.0));
}

#[test]
fn locality_of_captured_model_attention() {
    let m = live_model(Arch::DecLLM, 15);
    let mut captures = Vec::new();
    for row in rows(3, 14, 16) {
        let mut e = Eager::new();
        let mut opts = ForwardOptions { capture_attention: true, ..Default::default() };
        captures.extend(forward_decllm(&mut e, &m, &row, MaskKind::Causal, &mut opts).unwrap().attention);
    }
    let mean = mean_attention(&captures, AttentionKind::DecoderSelf).unwrap();
    let curve = locality_metric(&mean, 5).unwrap();
    assert_eq!(curve[0], 1.0);
    assert!(curve.iter().all(|&c| (-1e-9..=1.0 + 1e-6).contains(&c)));

    // Averaging then summing equals summing then averaging.
    let per: Vec<Vec<f64>> = captures
        .iter()
        .map(|c| {
            let a = AttnMatrix::new(c.t_q, c.t_k, c.weights.iter().map(|&w| w as f64).collect()).unwrap();
            locality_metric(&a, 5).unwrap()
        })
        .collect();
    for t in 0..curve.len() {
        let other = per.iter().map(|p| p[t]).sum::<f64>() / per.len() as f64;
        assert!((curve[t] - other).abs() < 1e-12);
    }
    assert!(mean_attention(&captures, AttentionKind::Cross).is_err());
}

#[test]
fn pooling_constant_matrix_gives_constant_grid() {
    let a = AttnMatrix::new(200, 300, vec![0.25; 60_000]).unwrap();
    let g = pool_attention(&a, POOL_SIZE, POOL_SIZE).unwrap();
    assert!(g.pooled);
    assert_eq!((g.rows, g.cols), (128, 128));
    assert!(g.data.iter().all(|&x| (x - 0.25).abs() < 1e-15));
}

#[test]
fn pooling_256_averages_two_by_two_blocks_and_conserves_mass() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for t in [256usize, 384] {
        let mut data: Vec<f64> = (0..t * t).map(|_| rng.gen::<f64>()).collect();
        for row in data.chunks_mut(t) {
            let z: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= z);
        }
        let a = AttnMatrix::new(t, t, data).unwrap();
        let g = pool_attention(&a, 128, 128).unwrap();
        let s = t / 128;
        if s == 2 {
            for i in 0..128 {
                for j in 0..128 {
                    let block = a.get(2 * i, 2 * j) + a.get(2 * i + 1, 2 * j) + a.get(2 * i, 2 * j + 1) + a.get(2 * i + 1, 2 * j + 1);
                    assert!((g.data[i * 128 + j] - block / 4.0).abs() < 1e-15);
                }
            }
        }
        let pooled: f64 = g.data.iter().sum();
        assert!((pooled * (s * s) as f64 - a.total()).abs() < 1e-9, "t={t}");
    }
    let causal = uniform_causal(256);
    let g = pool_attention(&causal, 128, 128).unwrap();
    assert!((g.data.iter().sum::<f64>() * 4.0 - 256.0).abs() < 1e-9);
}

#[test]
fn small_inputs_are_left_unpooled_with_a_note() {
    let a = uniform_causal(40);
    let g = pool_attention(&a, 128, 128).unwrap();
    assert!(!g.pooled);
    assert!(g.note.is_some());
    assert_eq!(g.data, a.data);
}

#[test]
fn attention_dump_round_trips_as_float32() {
    let dir = tempfile::tempdir().unwrap();
    let g = pool_attention(&uniform_causal(256), 128, 128).unwrap();
    write_attention_dump(dir.path(), &g, serde_json::json!({"kind": "decoder_self"})).unwrap();
    let back = read_attention_dump(dir.path()).unwrap();
    assert_eq!((back.t_q, back.t_k), (128, 128));
    for (a, b) in back.data.iter().zip(&g.data) {
        assert_eq!(*a, *b as f32 as f64);
    }
    let manifest = std::fs::read_to_string(dir.path().join("manifest.json")).unwrap();
    assert!(manifest.contains("\"f32\""));
    assert_eq!(std::fs::metadata(dir.path().join("params.bin")).unwrap().len(), 128 * 128 * 4);
}

struct Fixed(Vec<Vec<f64>>);

impl NextLogits for Fixed {
    fn next_logits(&mut self, generated: &[u32]) -> crate::Result<Vec<f64>> {
        Ok(self.0[generated.len()].clone())
    }
}

#[test]
fn greedy_loop_follows_the_argmax_chain() {
    let table = vec![vec![0.0, 3.0, 1.0], vec![2.0, 2.0, 1.0], vec![0.0, 0.0, 5.0], vec![9.0, 0.0, 0.0]];
    assert_eq!(greedy_loop(&mut Fixed(table.clone()), 4, None).unwrap(), vec![1, 0, 2, 0]);
    assert_eq!(greedy_loop(&mut Fixed(table.clone()), 2, None).unwrap(), vec![1, 0]);
    // Stop id produced at step 3 ends generation without being emitted.
    assert_eq!(greedy_loop(&mut Fixed(table), 4, Some(2)).unwrap(), vec![1, 0]);
    assert_eq!(argmax(&[1.0, 1.0, 0.5]), 0);
}

#[test]
fn model_decoding_matches_full_forward_argmax() {
    for arch in [Arch::DecLLM, Arch::RedLLM] {
        let m = live_model(arch, 18);
        let prompt = &rows(1, 5, 19)[0];
        let out = greedy_loop(&mut ModelDecoder::new(&m, prompt).unwrap(), 6, None).unwrap();
        assert_eq!(out.len(), 6);
        let mut e = Eager::new();
        let mut opts = ForwardOptions { extrapolate: true, ..Default::default() };
        let logits = match arch {
            Arch::DecLLM => {
                let mut seq = prompt.clone();
                seq.extend_from_slice(&out[..5]);
                forward_decllm(&mut e, &m, &seq, MaskKind::Causal, &mut opts).unwrap().logits
            }
            Arch::RedLLM => forward_redllm(&mut e, &m, prompt, &out, &mut opts).unwrap().logits,
        };
        let n = logits.outer();
        let tail = if arch == Arch::DecLLM { n - 6 } else { 0 };
        for (i, &tok) in out.iter().enumerate().take(6) {
            assert_eq!(argmax(logits.row(tail + i)) as u32, tok, "{arch:?} step {i}");
        }
        assert!(greedy_decode(&m, &[], 3).is_err());
    }
}

#[test]
fn eval_records_round_trip_through_csv() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("eval.csv");
    let r = EvalRecord {
        model: "dec-desk".into(),
        step: 100,
        params: 12345,
        train_flops: 1.5e12,
        domain: "web".into(),
        context_len: 256,
        prefix_len: 128,
        nll: 2.5,
        ppl: 2.5f64.exp(),
        rows: 7,
    };
    write_records(&path, &[r.clone(), r.clone()]).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().next().unwrap(), EVAL_HEADER);
    assert_eq!(read_records(&path).unwrap(), vec![r.clone(), r.clone()]);
    let second = EvalRecord { ppl: 4.0, ..r.clone() };
    assert_eq!(mean_domain_ppl(&[EvalRecord { ppl: 2.0, ..r }, second]), Some(3.0));
}
