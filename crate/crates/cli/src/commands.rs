use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::{info, warn};
use redlab_core::data::{chunk_pretrain, format_finetune, read_documents, read_finetune, ChunkMode, Row, Tokenizer};
use redlab_core::evaluation::{
    extrapolation_sweep, greedy_decode, locality_metric, mean_attention, mean_domain_ppl, per_position_logprob,
    pool_attention, prefix_ppl, read_records, write_attention_dump, write_records, AttentionStats, EvalRecord,
    RecordMeta, LOCALITY_WINDOW, POOL_SIZE,
};
use redlab_core::models::{
    count_params, flops_breakdown, forward_decllm, forward_redllm, Arch, AttentionKind, FlopsMode, ForwardOptions,
    MaskKind, Model, ModelConfig, SeqShape,
};
use redlab_core::numerics::Eager;
use redlab_core::scaling::{
    fit_power_law, group_records, isoflop_slice, pareto_frontier, write_fits, write_frontier, Covariate, Grouping,
    SizeCurve,
};
use redlab_core::training::checkpoint::{MANIFEST, BLOB};
use redlab_core::training::{
    latest_checkpoint, load_checkpoint, Checkpoint, DType, LrSchedule, TrainConfig, Trainer,
};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::args::*;
use crate::{usage, CliError, CliResult, Outcome};

fn out_dir(out: &Option<PathBuf>, command: &str) -> PathBuf {
    out.clone().unwrap_or_else(|| PathBuf::from("out").join(command))
}

fn require<T: Clone>(v: &Option<T>, flag: &str) -> CliResult<T> {
    v.clone().ok_or_else(|| CliError::Usage(format!("missing required option {flag}")))
}

fn require_some<T>(v: &[T], flag: &str) -> CliResult<()> {
    if v.is_empty() {
        return usage(format!("missing required option {flag}"));
    }
    Ok(())
}

fn model_tag(cfg: &ModelConfig) -> String {
    format!("{}-{}", cfg.arch.tag(), cfg.size_tag)
}

fn model_config(args: &ModelArgs) -> CliResult<ModelConfig> {
    match (&args.model_config, &args.model) {
        (Some(path), _) => Ok(ModelConfig::from_json(&std::fs::read_to_string(path)?)?),
        (None, Some(name)) => ModelConfig::preset(name).or_else(|e| usage(e.to_string())),
        (None, None) => usage("missing required option --model or --model-config"),
    }
}

fn dtype(v: &Option<String>) -> CliResult<DType> {
    match v.as_deref().unwrap_or("f64") {
        "f64" => Ok(DType::F64),
        "f32" => Ok(DType::F32),
        other => usage(format!("--checkpoint-dtype must be f32 or f64, got {other}")),
    }
}

fn load_tokenizer(path: &Option<PathBuf>) -> CliResult<Tokenizer> {
    Ok(Tokenizer::load(&require(path, "--tokenizer")?)?)
}

fn check_vocab(tok: &Tokenizer, cfg: &ModelConfig) -> CliResult<()> {
    if tok.vocab_size() > cfg.vocab_size {
        return usage(format!("tokenizer has {} ids but the model only {}", tok.vocab_size(), cfg.vocab_size));
    }
    Ok(())
}

fn read_all_documents(paths: &[PathBuf]) -> CliResult<Vec<String>> {
    let mut docs = Vec::new();
    for p in paths {
        docs.extend(read_documents(p)?);
    }
    Ok(docs)
}

fn domain_of(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "data".into())
}

fn eval_rows(path: &Path, tok: &Tokenizer, t: usize, max_rows: Option<usize>) -> CliResult<Vec<Vec<u32>>> {
    let docs = read_documents(path)?;
    let rows = chunk_pretrain(&docs, tok, t, ChunkMode::Causal)?;
    let n = max_rows.unwrap_or(usize::MAX);
    Ok(rows.into_iter().take(n).map(|r| r.tokens).collect())
}

fn checkpoint_dirs(set: &CheckpointSet) -> CliResult<Vec<PathBuf>> {
    let mut dirs = set.checkpoint.clone();
    for run in &set.run {
        let mut steps: Vec<(u64, PathBuf)> = Vec::new();
        for entry in std::fs::read_dir(run)? {
            let path = entry?.path();
            let step = path.file_name().and_then(|n| n.to_str()).and_then(|n| n.parse::<u64>().ok());
            if let Some(step) = step {
                if path.join(MANIFEST).is_file() {
                    steps.push((step, path));
                }
            }
        }
        steps.sort();
        dirs.extend(steps.into_iter().map(|(_, p)| p));
    }
    if dirs.is_empty() {
        return usage("missing required option --checkpoint or --run");
    }
    Ok(dirs)
}

fn record_meta(ckpt: &Checkpoint, domain: &str) -> RecordMeta {
    RecordMeta {
        model: model_tag(&ckpt.model.cfg),
        step: ckpt.meta.step,
        params: count_params(&ckpt.model.cfg).total,
        train_flops: ckpt.meta.train_flops,
        domain: domain.to_string(),
    }
}

fn outcome<A: serde::Serialize>(out: PathBuf, args: &A, resolved: Value) -> CliResult<Outcome> {
    let mut args = serde_json::to_value(args)?;
    args["out"] = json!(out);
    Ok(Outcome { out, args, resolved })
}

pub fn tokenizer_train(mut a: TokenizerTrainArgs) -> CliResult<Outcome> {
    require_some(&a.input, "--input")?;
    let out = out_dir(&a.out, "tokenizer");
    let vocab = *a.vocab_size.get_or_insert(32768);
    let docs = read_all_documents(&a.input)?;
    let trained = Tokenizer::train(docs.iter().map(String::as_str), vocab)?;
    std::fs::create_dir_all(&out)?;
    trained.tokenizer.save(&out.join("tokenizer.json"))?;
    info!("tokenizer with {} ids written to {}", trained.tokenizer.vocab_size(), out.display());
    let resolved = json!({
        "vocab_size": trained.tokenizer.vocab_size(),
        "requested_vocab": trained.requested_vocab,
        "truncated": trained.truncated,
        "documents": docs.len(),
    });
    outcome(out.clone(), &a, resolved)
}

fn fill_optim(o: &mut OptimArgs, steps: u64) -> CliResult<TrainConfig> {
    let steps = *o.steps.get_or_insert(steps);
    let batch = *o.batch_size.get_or_insert(8);
    let seed = *o.seed.get_or_insert(0);
    let mut cfg = TrainConfig::pretrain(steps, batch, seed);
    cfg.z_loss = *o.z_loss.get_or_insert(cfg.z_loss);
    cfg.clip_norm = *o.clip_norm.get_or_insert(cfg.clip_norm);
    cfg.checkpoint_every = *o.checkpoint_every.get_or_insert(0);
    o.checkpoint_dtype.get_or_insert_with(|| "f64".into());
    cfg.checkpoint_dtype = dtype(&o.checkpoint_dtype)?;
    cfg.stop_below = o.stop_below;
    cfg.wall_clock = o.wall_clock;
    if batch == 0 || steps == 0 {
        return usage("--steps and --batch-size must be positive");
    }
    Ok(cfg)
}

fn summarise(trainer: &Trainer, log: &[redlab_core::training::TrainLogRow], rows: usize) -> Value {
    json!({
        "model": trainer.model.cfg,
        "train": trainer.cfg,
        "rows": rows,
        "final_step": trainer.step(),
        "final_loss": log.last().map(|r| r.loss),
        "train_flops": trainer.train_flops(),
    })
}

pub fn pretrain(mut a: PretrainArgs) -> CliResult<Outcome> {
    require_some(&a.data, "--data")?;
    let out = out_dir(&a.out, "pretrain");
    let model_cfg = model_config(&a.model)?;
    let tok = load_tokenizer(&a.tokenizer)?;
    check_vocab(&tok, &model_cfg)?;
    let seq = *a.seq_len.get_or_insert(model_cfg.max_seq);
    let mut cfg = fill_optim(&mut a.optim, 1000)?;
    cfg.schedule = LrSchedule::WarmupCosine {
        warmup: *a.warmup.get_or_insert(LrSchedule::PRETRAIN_WARMUP),
        total_steps: cfg.steps,
        peak: *a.peak_lr.get_or_insert(LrSchedule::PRETRAIN_PEAK),
        floor_ratio: *a.floor_ratio.get_or_insert(LrSchedule::PRETRAIN_FLOOR_RATIO),
    };
    let mode = match model_cfg.arch {
        Arch::DecLLM => ChunkMode::Causal,
        Arch::RedLLM => ChunkMode::Prefix,
    };
    let rows = chunk_pretrain(read_all_documents(&a.data)?, &tok, seq, mode)?;
    if rows.is_empty() {
        return Err(CliError::Runtime(anyhow::anyhow!("corpus is shorter than one {seq}-token row")));
    }
    info!("{} rows of {seq} tokens", rows.len());
    let resume = if a.resume { latest_checkpoint(&out)? } else { None };
    let mut trainer = match resume {
        Some(dir) => {
            info!("resuming from {}", dir.display());
            let ckpt = load_checkpoint(&dir)?;
            if ckpt.model.cfg != model_cfg || ckpt.meta.seed != cfg.seed {
                return usage(format!("{} was trained with a different model or seed", dir.display()));
            }
            Trainer::from_checkpoint(ckpt, cfg)
        }
        None => Trainer::new(Model::new(model_cfg, cfg.seed)?, cfg),
    };
    let log = trainer.run(&rows, Some(&out))?;
    let resolved = summarise(&trainer, &log, rows.len());
    outcome(out, &a, resolved)
}

pub fn finetune(mut a: FinetuneArgs) -> CliResult<Outcome> {
    require_some(&a.data, "--data")?;
    let out = out_dir(&a.out, "finetune");
    let ckpt = load_checkpoint(&require(&a.checkpoint, "--checkpoint")?)?;
    let tok = load_tokenizer(&a.tokenizer)?;
    check_vocab(&tok, &ckpt.model.cfg)?;
    let mut cfg = fill_optim(&mut a.optim, 1000)?;
    cfg.schedule = LrSchedule::Constant { lr: *a.lr.get_or_insert(LrSchedule::FINETUNE_LR) };
    cfg.dropout = *a.dropout.get_or_insert(redlab_core::training::FINETUNE_DROPOUT);
    cfg.bidirectional = a.bidirectional;
    if a.bidirectional && ckpt.model.cfg.arch == Arch::RedLLM {
        warn!("--bidirectional has no effect on an encoder-decoder model");
    }
    let max_in = *a.max_input.get_or_insert(redlab_core::data::MAX_INPUT_TOKENS);
    let max_out = *a.max_target.get_or_insert(redlab_core::data::MAX_TARGET_TOKENS);
    let mut rows: Vec<Row> = Vec::new();
    for p in &a.data {
        for ex in read_finetune(p)? {
            rows.push(format_finetune(&ex, &tok, max_in, max_out)?);
        }
    }
    let mut trainer = Trainer::new(ckpt.model, cfg);
    let log = trainer.run(&rows, Some(&out))?;
    let resolved = summarise(&trainer, &log, rows.len());
    outcome(out, &a, resolved)
}

pub fn eval_ppl(mut a: EvalPplArgs) -> CliResult<Outcome> {
    require_some(&a.data, "--data")?;
    let out = out_dir(&a.out, "eval");
    let dirs = checkpoint_dirs(&a.checkpoints)?;
    let tok = load_tokenizer(&a.tokenizer)?;
    let mut records = Vec::new();
    for dir in &dirs {
        let ckpt = load_checkpoint(dir)?;
        check_vocab(&tok, &ckpt.model.cfg)?;
        let t = *a.context_len.get_or_insert(ckpt.model.cfg.max_seq);
        let k = *a.prefix_len.get_or_insert(t / 2);
        if k == 0 || k >= t {
            return usage(format!("--prefix-len must satisfy 0 < k < {t}"));
        }
        for path in &a.data {
            let rows = eval_rows(path, &tok, t, a.max_rows)?;
            let r = prefix_ppl(&ckpt.model, &rows, t, k, &record_meta(&ckpt, &domain_of(path)))?;
            info!("{} step {} {}: ppl {:.4} over {} rows", r.model, r.step, r.domain, r.ppl, r.rows);
            records.push(r);
        }
    }
    std::fs::create_dir_all(&out)?;
    write_records(&out.join("eval.csv"), &records)?;
    let resolved = json!({ "checkpoints": dirs, "records": records.len(), "mean_domain_ppl": mean_domain_ppl(&records) });
    outcome(out, &a, resolved)
}

pub fn extrapolate(mut a: ExtrapolateArgs) -> CliResult<Outcome> {
    require_some(&a.data, "--data")?;
    let out = out_dir(&a.out, "extrapolate");
    let dirs = checkpoint_dirs(&a.checkpoints)?;
    let tok = load_tokenizer(&a.tokenizer)?;
    let mut records = Vec::new();
    for dir in &dirs {
        let ckpt = load_checkpoint(dir)?;
        check_vocab(&tok, &ckpt.model.cfg)?;
        let t = ckpt.model.cfg.max_seq;
        if a.prefix_lens.is_empty() {
            a.prefix_lens = vec![1, t / 4, t / 2];
        }
        if a.context_lens.is_empty() {
            a.context_lens = vec![t, 2 * t, 4 * t, 8 * t];
        }
        let longest = *a.context_lens.iter().max().expect("non-empty");
        for path in &a.data {
            let rows = eval_rows(path, &tok, longest, a.max_rows)?;
            let meta = record_meta(&ckpt, &domain_of(path));
            records.extend(extrapolation_sweep(&ckpt.model, &rows, &a.prefix_lens, &a.context_lens, &meta)?);
        }
    }
    std::fs::create_dir_all(&out)?;
    write_records(&out.join("extrapolation.csv"), &records)?;
    let resolved = json!({ "checkpoints": dirs, "cells": records.len() });
    outcome(out, &a, resolved)
}

pub fn analyze_attention(mut a: AnalyzeAttentionArgs) -> CliResult<Outcome> {
    require_some(&a.data, "--data")?;
    let out = out_dir(&a.out, "attention");
    let ckpt = load_checkpoint(&require(&a.checkpoint, "--checkpoint")?)?;
    let model = &ckpt.model;
    let tok = load_tokenizer(&a.tokenizer)?;
    check_vocab(&tok, &model.cfg)?;
    let t = *a.context_len.get_or_insert(model.cfg.max_seq);
    let k = *a.prefix_len.get_or_insert(t / 2);
    let n_rows = *a.rows.get_or_insert(8);
    let window = *a.window.get_or_insert(LOCALITY_WINDOW);
    let pool = *a.pool.get_or_insert(POOL_SIZE);
    if k == 0 || k >= t {
        return usage(format!("--prefix-len must satisfy 0 < k < {t}"));
    }
    let mut rows = Vec::new();
    for p in &a.data {
        rows.extend(eval_rows(p, &tok, t, None)?);
    }
    rows.truncate(n_rows);
    if rows.is_empty() {
        return Err(CliError::Runtime(anyhow::anyhow!("no {t}-token rows in the data")));
    }

    let mut captures = Vec::new();
    for row in &rows {
        let mut e = Eager::new();
        let mut opts = ForwardOptions { capture_attention: true, extrapolate: true, ..Default::default() };
        let attn = match model.cfg.arch {
            Arch::DecLLM => forward_decllm(&mut e, model, row, MaskKind::Causal, &mut opts)?.attention,
            Arch::RedLLM => forward_redllm(&mut e, model, &row[..k], &row[k..], &mut opts)?.attention,
        };
        captures.extend(attn);
    }
    let logprob = per_position_logprob(model, &rows, k)?;
    let first_pos = match model.cfg.arch {
        Arch::DecLLM => 0,
        Arch::RedLLM => k,
    };

    std::fs::create_dir_all(&out)?;
    let kinds = [AttentionKind::EncoderSelf, AttentionKind::DecoderSelf, AttentionKind::Cross];
    let mut notes = BTreeMap::new();
    let mut stats = None;
    for kind in kinds {
        if !captures.iter().any(|c| c.kind == kind) {
            continue;
        }
        let mean = mean_attention(&captures, kind)?;
        let grid = pool_attention(&mean, pool, pool)?;
        if let Some(note) = &grid.note {
            warn!("{}: {note}", kind.tag());
            notes.insert(kind.tag(), note.clone());
        }
        let info = json!({ "kind": kind.tag(), "model": model_tag(&model.cfg), "step": ckpt.meta.step, "rows": rows.len() });
        write_attention_dump(&out.join("attention").join(kind.tag()), &grid, info)?;
        if kind == AttentionKind::DecoderSelf {
            let locality = locality_metric(&mean, window)?;
            stats = Some(AttentionStats { kind: kind.tag().into(), window, locality, grid, logprob: logprob.clone() });
        }
    }
    let stats = stats.ok_or_else(|| anyhow::anyhow!("no decoder self-attention captured"))?;

    let mut w = csv::Writer::from_path(out.join("locality.csv"))?;
    w.write_record(["query", "position", "local_mass"])?;
    for (q, m) in stats.locality.iter().enumerate() {
        w.write_record([q.to_string(), (first_pos + q).to_string(), m.to_string()])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(out.join("logprob.csv"))?;
    w.write_record(["position", "logprob"])?;
    for (i, lp) in stats.logprob.iter().enumerate() {
        w.write_record([(k + i).to_string(), lp.to_string()])?;
    }
    w.flush()?;
    std::fs::write(out.join("stats.json"), serde_json::to_string(&stats)? + "\n")?;
    let resolved = json!({ "rows": rows.len(), "notes": notes, "dump_files": [MANIFEST, BLOB] });
    outcome(out, &a, resolved)
}

#[derive(Deserialize)]
struct PromptLine {
    input: String,
}

pub fn decode(mut a: DecodeArgs) -> CliResult<Outcome> {
    let out = out_dir(&a.out, "decode");
    let ckpt = load_checkpoint(&require(&a.checkpoint, "--checkpoint")?)?;
    let tok = load_tokenizer(&a.tokenizer)?;
    check_vocab(&tok, &ckpt.model.cfg)?;
    let max_new = *a.max_new.get_or_insert(64);
    let mut prompts = a.prompt.clone();
    if let Some(path) = &a.input {
        for (i, line) in std::fs::read_to_string(path)?.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let p: PromptLine = serde_json::from_str(line)
                .map_err(|e| anyhow::anyhow!("{}:{}: {e}", path.display(), i + 1))?;
            prompts.push(p.input);
        }
    }
    if prompts.is_empty() {
        return usage("missing required option --prompt or --input");
    }
    std::fs::create_dir_all(&out)?;
    let mut lines = String::new();
    for prompt in &prompts {
        let ids = tok.encode(prompt);
        let generated = greedy_decode(&ckpt.model, &ids, max_new)?;
        let text = tok.decode(&generated)?;
        lines += &(serde_json::to_string(&json!({ "prompt": prompt, "output": text, "tokens": generated }))? + "\n");
    }
    std::fs::write(out.join("decode.jsonl"), &lines)?;
    print!("{lines}");
    outcome(out, &a, json!({ "prompts": prompts.len() }))
}

/// Records for one analysis. Without a domain filter, several domains are
/// averaged per evaluation cell (arithmetic mean of per-domain perplexity).
fn select_records(paths: &[PathBuf], domain: &Option<String>) -> CliResult<Vec<EvalRecord>> {
    require_some(paths, "--records")?;
    let mut all = Vec::new();
    for p in paths {
        all.extend(read_records(p)?);
    }
    if let Some(d) = domain {
        all.retain(|r| &r.domain == d);
        if all.is_empty() {
            return usage(format!("no records for domain {d}"));
        }
        return Ok(all);
    }
    let mut cells: BTreeMap<(String, u64, usize, usize), Vec<EvalRecord>> = BTreeMap::new();
    for r in all {
        cells.entry((r.model.clone(), r.step, r.context_len, r.prefix_len)).or_default().push(r);
    }
    Ok(cells
        .into_values()
        .map(|group| {
            let ppl = mean_domain_ppl(&group).expect("non-empty group");
            let first = group[0].clone();
            let domain = if group.len() == 1 { first.domain.clone() } else { "mean".into() };
            EvalRecord { domain, ppl, nll: ppl.ln(), rows: group.iter().map(|r| r.rows).sum(), ..first }
        })
        .collect())
}

fn covariate(v: &Option<String>) -> CliResult<Covariate> {
    match v.as_deref().unwrap_or("flops") {
        "flops" => Ok(Covariate::Flops),
        "params" => Ok(Covariate::Params),
        other => usage(format!("--covariate must be flops or params, got {other}")),
    }
}

fn grouping(v: &Option<String>) -> CliResult<Grouping> {
    match v.as_deref().unwrap_or("arch") {
        "arch" => Ok(Grouping::Arch),
        "model" => Ok(Grouping::Model),
        other => usage(format!("--group must be arch or model, got {other}")),
    }
}

pub fn fit_scaling(mut a: FitScalingArgs) -> CliResult<Outcome> {
    let out = out_dir(&a.out, "scaling");
    a.covariate.get_or_insert_with(|| "flops".into());
    a.group.get_or_insert_with(|| "arch".into());
    let cov = covariate(&a.covariate)?;
    let grp = grouping(&a.group)?;
    let records = select_records(&a.records, &a.domain)?;
    let mut fits = Vec::new();
    for (family, recs) in group_records(&records, grp) {
        let fit = fit_power_law(&family, &recs, cov, a.irreducible)?;
        info!("{family}: ppl = {:.4e} * x^-{:.4} (rms {:.2e})", fit.a, fit.alpha, fit.rms_residual);
        fits.push(fit);
    }
    std::fs::create_dir_all(&out)?;
    write_fits(&out.join("fits.json"), &fits)?;
    outcome(out, &a, json!({ "families": fits.len() }))
}

pub fn isoflop(mut a: IsoflopArgs) -> CliResult<Outcome> {
    let out = out_dir(&a.out, "isoflop");
    let records = select_records(&a.records, &a.domain)?;
    if a.budgets.is_empty() {
        let lo = records.iter().map(|r| r.train_flops).fold(f64::INFINITY, f64::min);
        let hi = records.iter().map(|r| r.train_flops).fold(0.0, f64::max);
        let (ln_lo, ln_hi) = (lo.ln(), hi.ln());
        a.budgets = (1..4).map(|i| (ln_lo + (ln_hi - ln_lo) * i as f64 / 4.0).exp()).collect();
        a.budgets.insert(0, lo);
        a.budgets.push(hi);
    }
    let mut slices = Vec::new();
    let mut skipped = Vec::new();
    for (family, recs) in group_records(&records, Grouping::Arch) {
        let mut curves = Vec::new();
        for (model, size_recs) in group_records(&recs, Grouping::Model) {
            match SizeCurve::from_records(&size_recs, a.irreducible) {
                Ok(c) => curves.push(c),
                Err(e) => {
                    warn!("{model}: {e}");
                    skipped.push(model);
                }
            }
        }
        if curves.is_empty() {
            continue;
        }
        slices.extend(isoflop_slice(&family, &curves, &a.budgets)?);
    }
    if slices.is_empty() {
        return Err(CliError::Runtime(anyhow::anyhow!("no model size has enough checkpoints to fit")));
    }
    std::fs::create_dir_all(&out)?;
    let mut w = csv::Writer::from_path(out.join("isoflop.csv"))?;
    w.write_record(["family", "budget", "model", "params", "ppl", "extrapolated", "optimal"])?;
    for s in &slices {
        for (i, p) in s.points.iter().enumerate() {
            w.write_record([
                s.family.clone(),
                s.budget.to_string(),
                p.model.clone(),
                p.params.to_string(),
                p.ppl.to_string(),
                p.extrapolated.to_string(),
                (i == s.argmin).to_string(),
            ])?;
        }
    }
    w.flush()?;
    std::fs::write(out.join("isoflop.json"), serde_json::to_string_pretty(&slices)? + "\n")?;
    outcome(out, &a, json!({ "slices": slices.len(), "skipped_sizes": skipped }))
}

pub fn frontier(a: FrontierArgs) -> CliResult<Outcome> {
    let out = out_dir(&a.out, "frontier");
    let records = select_records(&a.records, &a.domain)?;
    let points = pareto_frontier(&records)?;
    std::fs::create_dir_all(&out)?;
    write_frontier(&out.join("frontier.csv"), &points)?;
    outcome(out, &a, json!({ "points": points.len() }))
}

pub fn flops(mut a: FlopsArgs) -> CliResult<Outcome> {
    let out = out_dir(&a.out, "flops");
    let cfg = model_config(&ModelArgs { model: a.preset.clone(), model_config: a.model_config.clone() })?;
    let mode = match a.mode.get_or_insert_with(|| "train".into()).as_str() {
        "train" => FlopsMode::Train,
        "infer" => FlopsMode::Infer,
        other => return usage(format!("--mode must be train or infer, got {other}")),
    };
    let seq = *a.seq.get_or_insert(cfg.max_seq);
    let shape = match (cfg.arch, a.prefix, a.target) {
        (Arch::DecLLM, None, None) => SeqShape::Full(seq),
        (Arch::DecLLM, Some(p), Some(t)) => SeqShape::Full(p + t),
        (_, p, t) => SeqShape::Split { prefix: p.unwrap_or(seq / 2), target: t.unwrap_or(seq - seq / 2) },
    };
    let params = count_params(&cfg);
    let breakdown = flops_breakdown(&cfg, shape, mode)?;
    let report = json!({
        "model": model_tag(&cfg),
        "params": params,
        "shape": shape,
        "mode": mode,
        "flops_per_sequence": breakdown.total(),
        "breakdown": breakdown,
    });
    println!("{}", serde_json::to_string_pretty(&report)?);
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("flops.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    outcome(out, &a, report)
}
