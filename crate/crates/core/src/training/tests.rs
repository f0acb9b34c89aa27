use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::Row;
use crate::models::{Model, ModelConfig};
use crate::numerics::{Grads, Graph, Ops, Params, Tensor};

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn uniform_logits_give_log_vocab() {
    let logits = Tensor::zeros(&[3, 50]);
    let parts = lm_loss(&logits, &[1, 2, 3], &[true, true, true], Z_LOSS_COEF).unwrap();
    assert!(close(parts.nll, 50f64.ln(), 1e-12));
    assert!(close(parts.z_loss, 1e-4 * 50f64.ln().powi(2), 1e-15));
}

#[test]
fn confident_correct_logit_limits() {
    let mut data = vec![0.0; 10];
    data[4] = 60.0;
    let logits = Tensor::new(vec![1, 10], data).unwrap();
    let parts = lm_loss(&logits, &[4], &[true], Z_LOSS_COEF).unwrap();
    assert!(parts.nll < 1e-20);
    assert!(close(parts.z_loss, 1e-4 * 3600.0, 1e-9));
}

#[test]
fn loss_matches_brute_force_log_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let v = 11;
    let data: Vec<f64> = (0..4 * v).map(|_| rng.gen_range(-4.0..4.0)).collect();
    let logits = Tensor::new(vec![4, v], data.clone()).unwrap();
    let targets = [3u32, 0, 10, 7];
    let mask = [true, false, true, true];
    let parts = lm_loss(&logits, &targets, &mask, Z_LOSS_COEF).unwrap();
    let (mut nll, mut z, mut n) = (0.0, 0.0, 0.0);
    for r in 0..4 {
        if !mask[r] {
            continue;
        }
        let row = &data[r * v..(r + 1) * v];
        let lse = row.iter().map(|x| x.exp()).sum::<f64>().ln();
        nll += lse - row[targets[r] as usize];
        z += lse * lse;
        n += 1.0;
    }
    assert!(close(parts.nll, nll / n, 1e-10));
    assert!(close(parts.z_loss, 1e-4 * z / n, 1e-12));
    assert_eq!(parts.tokens, 3);
    assert!(matches!(lm_loss(&logits, &targets, &[false; 4], 0.0), Err(crate::Error::AllMasked)));
}

fn scalar_params(x: f64) -> Params {
    let mut p = Params::new();
    p.add("w", Tensor::vector(vec![x]));
    p
}

fn grads_of(params: &Params, values: &[Vec<f64>]) -> Grads {
    let mut g = Grads::zeros_like(params);
    for (buf, v) in g.iter_mut().zip(values) {
        buf.copy_from_slice(v);
    }
    g
}

#[test]
fn adafactor_zero_gradient_is_a_no_op() {
    let mut p = scalar_params(0.7);
    let mut st = OptimizerState::new(&p);
    let g = grads_of(&p, &[vec![0.0]]);
    Adafactor::default().step(&mut p, &g, &mut st, 0.01).unwrap();
    assert_eq!(p.get(crate::numerics::ParamId(0)).data(), &[0.7]);
}

#[test]
fn adafactor_first_step_moves_by_lr() {
    let mut p = scalar_params(0.0);
    let mut st = OptimizerState::new(&p);
    let g = grads_of(&p, &[vec![1.0]]);
    Adafactor::default().step(&mut p, &g, &mut st, 0.01).unwrap();
    assert_eq!(st.v[0][0], 1.0 + 1e-30);
    assert!(close(p.get(crate::numerics::ParamId(0)).data()[0], -0.01, 1e-15));
}

#[test]
fn adafactor_scalar_trace_matches_hand_computation() {
    let gs = [1.0, -2.0, 0.5, 0.25, -0.1, 3.0, 0.0, -0.75, 0.3, 1.5];
    let lr = 0.02;
    let mut p = scalar_params(0.5);
    let mut st = OptimizerState::new(&p);
    // Independent scalar recurrence.
    let (mut w, mut v) = (0.5f64, 0.0f64);
    for (i, &g) in gs.iter().enumerate() {
        let t = (i + 1) as f64;
        let b = 1.0 - t.powf(-0.8);
        v = b * v + (1.0 - b) * (g * g + 1e-30);
        let u = g / v.sqrt();
        // rms of a single value is its magnitude
        let u = u / u.abs().max(1.0);
        w -= lr * u;
        let grads = grads_of(&p, &[vec![g]]);
        Adafactor::default().step(&mut p, &grads, &mut st, lr).unwrap();
        assert!(close(p.get(crate::numerics::ParamId(0)).data()[0], w, 1e-12), "step {}", i + 1);
        assert!(close(st.v[0][0], v, 1e-12));
    }
    // Step 2 by hand: b = 1 - 2^-0.8, v = b + (1-b)*4, |u| > 1 so it clips to -1.
    let b2 = 1.0 - 2f64.powf(-0.8);
    let v2 = b2 + (1.0 - b2) * 4.0;
    assert!(2.0 / v2.sqrt() > 1.0);
    assert_eq!(st.step, 10);
}

#[test]
fn constant_gradient_updates_converge_to_lr() {
    let mut p = Params::new();
    p.add("w", Tensor::vector(vec![0.0, 0.0, 0.0]));
    let mut st = OptimizerState::new(&p);
    let g = grads_of(&p, &[vec![1.0, -2.0, 3.0]]);
    let lr = 0.01;
    let mut prev = vec![0.0; 3];
    for _ in 0..200 {
        Adafactor::default().step(&mut p, &g, &mut st, lr).unwrap();
        let now = p.get(crate::numerics::ParamId(0)).data().to_vec();
        let delta: Vec<f64> = now.iter().zip(&prev).map(|(a, b)| (a - b).abs()).collect();
        let rms = (delta.iter().map(|d| d * d).sum::<f64>() / 3.0).sqrt();
        assert!(close(rms, lr, 1e-9));
        prev = now;
    }
}

#[test]
fn adafactor_is_order_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let ga: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let gb: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let run = |first_a: bool| {
        let mut p = Params::new();
        let order: Vec<(&str, &Vec<f64>, &Vec<f64>)> =
            if first_a { vec![("a", &a, &ga), ("b", &b, &gb)] } else { vec![("b", &b, &gb), ("a", &a, &ga)] };
        for (n, x, _) in &order {
            p.add(*n, Tensor::vector((*x).clone()));
        }
        let g = grads_of(&p, &order.iter().map(|(_, _, g)| (*g).clone()).collect::<Vec<_>>());
        let mut st = OptimizerState::new(&p);
        for _ in 0..3 {
            Adafactor::default().step(&mut p, &g, &mut st, 0.05).unwrap();
        }
        let get = |n: &str| p.get(p.id(n).unwrap()).data().to_vec();
        (get("a"), get("b"))
    };
    assert_eq!(run(true), run(false));
}

#[test]
fn non_finite_gradient_aborts_without_changes() {
    let mut p = Params::new();
    p.add("a", Tensor::vector(vec![1.0]));
    p.add("b", Tensor::vector(vec![2.0]));
    let mut st = OptimizerState::new(&p);
    let g = grads_of(&p, &[vec![0.5], vec![f64::NAN]]);
    let err = Adafactor::default().step(&mut p, &g, &mut st, 0.1).unwrap_err();
    assert!(matches!(err, crate::Error::NonFiniteGradient(ref n) if n == "b"));
    assert_eq!(p.get(p.id("a").unwrap()).data(), &[1.0]);
    assert_eq!(st.step, 0);
}

#[test]
fn schedule_endpoints() {
    let s = LrSchedule::pretrain(10_000);
    assert_eq!(s.lr(0), 0.0);
    assert!(close(s.lr(1000), 0.005, 1e-15));
    assert_eq!(s.lr(2000), 0.01);
    assert!(close(s.lr(10_000), 0.001, 1e-15));
    assert!(close(s.lr(6000), 0.0055, 1e-15));
    assert!(close(s.lr(20_000), 0.001, 1e-15));
    for t in 2000..10_000 {
        assert!(s.lr(t + 1) <= s.lr(t));
    }
    assert_eq!(LrSchedule::finetune().lr(0), 0.001);
    assert_eq!(LrSchedule::finetune().lr(12345), 0.001);
}

#[test]
fn gradient_clipping() {
    let mut p = Params::new();
    p.add("a", Tensor::vector(vec![0.0, 0.0]));
    p.add("b", Tensor::vector(vec![0.0]));
    let mut small = grads_of(&p, &[vec![0.3, 0.0], vec![0.4]]);
    let before = small.clone();
    assert!(close(clip_grads(&mut small, 1.0), 0.5, 1e-15));
    assert_eq!(small, before);

    let mut big = grads_of(&p, &[vec![2.4, 0.0], vec![3.2]]);
    let pre: Vec<f64> = big.iter().flatten().copied().collect();
    assert!(close(clip_grads(&mut big, 1.0), 4.0, 1e-12));
    let post: Vec<f64> = big.iter().flatten().copied().collect();
    assert!(close(big.global_norm(), 1.0, 1e-12));
    for (a, b) in pre.iter().zip(&post) {
        assert!(close(*b, a * 0.25, 1e-15));
    }
    let dot: f64 = pre.iter().zip(&post).map(|(a, b)| a * b).sum();
    let cos = dot / (4.0 * 1.0);
    assert!(close(cos, 1.0, 1e-12));
}

fn tiny_model(arch: &str) -> Model {
    let mut cfg = ModelConfig::preset(arch).unwrap();
    cfg.vocab_size = 264;
    Model::new(cfg, 5).unwrap()
}

fn rows_for(model: &Model, n: usize, t: usize, seed: u64) -> Vec<Row> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let toks: Vec<u32> = (0..t).map(|_| rng.gen_range(0..256)).collect();
            match model.cfg.arch {
                crate::models::Arch::DecLLM => Row::causal(toks),
                crate::models::Arch::RedLLM => Row::prefix(toks, t / 2),
            }
        })
        .collect()
}

#[test]
fn masked_final_token_identity_does_not_touch_gradients() {
    // A masked last token is never read as input, so swapping it for another
    // id that appears nowhere else leaves every gradient bit-identical.
    let model = tiny_model("dec-tiny");
    let grads = |last: u32| {
        let mut row = Row::causal(vec![1, 2, 3, 4, last]);
        row.loss_mask[4] = false;
        let mut g = Graph::new();
        let r = row_logits(&mut g, &model, &row, false, &mut Default::default()).unwrap();
        let (loss, _) = g.lm_loss(&r.logits, &r.targets, &r.mask, Z_LOSS_COEF).unwrap();
        g.backward(&loss).unwrap();
        let mut out = Grads::zeros_like(&model.params);
        g.accumulate_param_grads(&mut out);
        out
    };
    assert_eq!(grads(200), grads(201));
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let model = tiny_model("red-tiny");
    let mut trainer = Trainer::new(model, TrainConfig::pretrain(3, 2, 1));
    let data = rows_for(&trainer.model, 4, 12, 2);
    trainer.run(&data, None).unwrap();
    for dtype in [DType::F64, DType::F32] {
        let a = dir.path().join(format!("{dtype:?}-a"));
        let b = dir.path().join(format!("{dtype:?}-b"));
        let p1 = save_checkpoint(&a, &trainer.model, &trainer.optimizer, &trainer.meta(), dtype).unwrap();
        let ck = load_checkpoint(&p1).unwrap();
        let p2 = save_checkpoint(&b, &ck.model, &ck.optimizer, &ck.meta, dtype).unwrap();
        for f in [checkpoint::MANIFEST, checkpoint::BLOB] {
            assert_eq!(std::fs::read(p1.join(f)).unwrap(), std::fs::read(p2.join(f)).unwrap(), "{f}");
        }
        if dtype == DType::F64 {
            assert_eq!(ck.model.params, trainer.model.params);
            assert_eq!(ck.optimizer, trainer.optimizer);
        }
    }
    assert!(load_checkpoint(&dir.path().join("missing")).is_err());
}

#[test]
fn resume_reproduces_losses_bit_exactly() {
    for arch in ["dec-tiny", "red-tiny"] {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = TrainConfig::pretrain(20, 2, 11);
        cfg.schedule = LrSchedule::WarmupCosine { warmup: 5, total_steps: 20, peak: 0.01, floor_ratio: 0.1 };
        cfg.dropout = 0.1;
        cfg.checkpoint_every = 10;
        cfg.wall_clock = false;
        let model = tiny_model(arch);
        let data = rows_for(&model, 5, 10, 4);
        let full_dir = dir.path().join("full");
        let mut full = Trainer::new(model, cfg.clone());
        let reference = full.run(&data, Some(&full_dir)).unwrap();

        let ck = load_checkpoint(&full_dir.join("10")).unwrap();
        let mut resumed = Trainer::from_checkpoint(ck, cfg);
        let tail = resumed.run(&data, None).unwrap();
        assert_eq!(tail.len(), 10);
        for (a, b) in tail.iter().zip(&reference[10..]) {
            assert_eq!(a.loss.to_bits(), b.loss.to_bits(), "{arch} step {}", a.step);
            assert_eq!(a, b);
        }
        assert_eq!(resumed.model.params, full.model.params);
    }
}

#[test]
fn log_file_has_exact_header_and_monotone_counters() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = TrainConfig::pretrain(4, 2, 0);
    cfg.wall_clock = false;
    let model = tiny_model("dec-tiny");
    let data = rows_for(&model, 3, 8, 1);
    Trainer::new(model, cfg).run(&data, Some(dir.path())).unwrap();
    let text = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(LOG_HEADER));
    let mut r = csv::Reader::from_path(dir.path().join(LOG_FILE)).unwrap();
    let rows: Vec<TrainLogRow> = r.deserialize().map(|x| x.unwrap()).collect();
    assert_eq!(rows.len(), 4);
    for w in rows.windows(2) {
        assert!(w[1].tokens_seen > w[0].tokens_seen);
        assert!(w[1].train_flops > w[0].train_flops);
        assert!(w[1].step == w[0].step + 1);
    }
    assert_eq!(rows[0].tokens_seen, 2 * 7);
    assert!(dir.path().join("4").join(checkpoint::MANIFEST).is_file());
}

#[test]
fn blown_up_parameters_halt_with_diagnostic() {
    let mut model = tiny_model("dec-tiny");
    let id = model.final_norm();
    model.params.set_data(id, vec![1e300; model.cfg.d]).unwrap();
    let data = rows_for(&model, 2, 6, 0);
    let err = Trainer::new(model, TrainConfig::pretrain(2, 1, 0)).run(&data, None).unwrap_err();
    assert!(matches!(err, crate::Error::NanLoss { step: 1 }), "{err}");

    let mut model = tiny_model("dec-tiny");
    let id = model.embedding();
    let n = model.params.get(id).numel();
    model.params.set_data(id, vec![f64::MAX; n]).unwrap();
    let before = model.params.clone();
    let mut trainer = Trainer::new(model, TrainConfig::pretrain(2, 1, 0));
    let err = trainer.run(&data, None).unwrap_err();
    assert!(matches!(err, crate::Error::NonFiniteGradient(_)), "{err}");
    assert_eq!(trainer.model.params, before);
    assert_eq!(trainer.step(), 0);
}

#[test]
fn batches_are_a_function_of_seed_and_step() {
    let a = batch_indices(3, 7, 5, 4);
    assert_eq!(a, batch_indices(3, 7, 5, 4));
    assert_ne!(batch_indices(3, 7, 1, 7), batch_indices(4, 7, 1, 7));
    // every epoch is a permutation
    let mut epoch: Vec<usize> = batch_indices(3, 7, 1, 7);
    epoch.sort();
    assert_eq!(epoch, (0..7).collect::<Vec<_>>());
}
