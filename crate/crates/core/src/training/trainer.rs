use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Row;
use crate::error::{Error, Result};
use crate::models::{
    flops_per_sequence, forward_decllm, forward_redllm, Arch, Dropout, FlopsMode, ForwardOptions, MaskKind, Model,
    SeqShape,
};
use crate::numerics::kernels::lm_loss;
use crate::numerics::{Eager, Graph, Grads, Ops, SeedStreams};
use crate::training::checkpoint::{save_checkpoint, Checkpoint, CheckpointMeta, DType};
use crate::training::{clip_grads, Adafactor, LrSchedule, OptimizerState};

pub const Z_LOSS_COEF: f64 = 1e-4;
pub const GRAD_CLIP: f64 = 1.0;
pub const FINETUNE_DROPOUT: f64 = 0.05;
pub const LOG_FILE: &str = "train_log.csv";
pub const LOG_HEADER: &str = "step,loss,z_loss,lr,grad_norm,tokens_seen,train_flops,wall_seconds";

/// Logits of one row together with the targets they predict.
pub struct RowLogits<V> {
    pub logits: V,
    pub targets: Vec<u32>,
    pub mask: Vec<bool>,
    pub shape: SeqShape,
}

/// Runs the architecture-appropriate forward pass for a row.
///
/// Decoder-only reads `tokens[..n-1]` and predicts `tokens[1..]`; with
/// `bidirectional` set the input span is attended bidirectionally. The
/// encoder-decoder encodes `tokens[..k]` and predicts `tokens[k..]`.
pub fn row_logits<O: Ops>(
    ops: &mut O,
    model: &Model,
    row: &Row,
    bidirectional: bool,
    opts: &mut ForwardOptions,
) -> Result<RowLogits<O::V>> {
    row.validate()?;
    match model.cfg.arch {
        Arch::DecLLM => {
            let n = row.tokens.len();
            if n < 2 {
                return Err(Error::Input("a decoder-only row needs at least two tokens".into()));
            }
            let mask_kind = if bidirectional && row.prefix_len > 0 {
                MaskKind::PrefixBidirectional(row.prefix_len)
            } else {
                MaskKind::Causal
            };
            let out = forward_decllm(ops, model, &row.tokens[..n - 1], mask_kind, opts)?;
            Ok(RowLogits {
                logits: out.logits,
                targets: row.tokens[1..].to_vec(),
                mask: row.loss_mask[1..].to_vec(),
                shape: SeqShape::Full(n - 1),
            })
        }
        Arch::RedLLM => {
            let k = row.prefix_len;
            if k == 0 || k >= row.tokens.len() {
                return Err(Error::Input(format!("encoder-decoder rows need 0 < k < T, got k={k}")));
            }
            if row.loss_mask[..k].iter().any(|&m| m) {
                return Err(Error::Input("encoder-decoder rows cannot score input tokens".into()));
            }
            let out = forward_redllm(ops, model, row.input_ids(), row.target_ids(), opts)?;
            Ok(RowLogits {
                logits: out.logits,
                targets: row.target_ids().to_vec(),
                mask: row.loss_mask[k..].to_vec(),
                shape: SeqShape::Split { prefix: k, target: row.tokens.len() - k },
            })
        }
    }
}

/// Token-weighted mean next-token loss (no z-loss, no dropout) over every
/// scored token of `rows`.
pub fn corpus_loss(model: &Model, rows: &[Row], bidirectional: bool) -> Result<f64> {
    let (mut sum, mut count) = (0.0, 0usize);
    for row in rows {
        let mut e = Eager::new();
        let r = row_logits(&mut e, model, row, bidirectional, &mut ForwardOptions::default())?;
        let parts = lm_loss(&r.logits, &r.targets, &r.mask, 0.0)?;
        sum += parts.nll * parts.tokens as f64;
        count += parts.tokens;
    }
    if count == 0 {
        return Err(Error::Input("no scored tokens".into()));
    }
    Ok(sum / count as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub schedule: LrSchedule,
    pub z_loss: f64,
    pub clip_norm: f64,
    pub dropout: f64,
    /// Bidirectional attention over the input span (decoder-only finetuning).
    pub bidirectional: bool,
    /// Save every this many steps; the final step is always saved.
    pub checkpoint_every: u64,
    pub checkpoint_dtype: DType,
    /// Record elapsed time in the log; off gives byte-reproducible logs.
    pub wall_clock: bool,
    /// Stop as soon as a step's loss falls below this value.
    pub stop_below: Option<f64>,
}

impl TrainConfig {
    pub fn pretrain(steps: u64, batch_size: usize, seed: u64) -> Self {
        Self {
            steps,
            batch_size,
            seed,
            schedule: LrSchedule::pretrain(steps),
            z_loss: Z_LOSS_COEF,
            clip_norm: GRAD_CLIP,
            dropout: 0.0,
            bidirectional: false,
            checkpoint_every: 0,
            checkpoint_dtype: DType::F64,
            wall_clock: true,
            stop_below: None,
        }
    }

    pub fn finetune(steps: u64, batch_size: usize, seed: u64) -> Self {
        Self { schedule: LrSchedule::finetune(), dropout: FINETUNE_DROPOUT, ..Self::pretrain(steps, batch_size, seed) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: u64,
    pub loss: f64,
    pub z_loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    /// Cumulative scored target tokens.
    pub tokens_seen: u64,
    pub train_flops: f64,
    pub wall_seconds: f64,
}

/// Row indices for a (1-based) step: epochs are independent seeded
/// permutations, so any step's batch is a pure function of the seed.
pub fn batch_indices(seed: u64, n_rows: usize, step: u64, batch: usize) -> Vec<usize> {
    let streams = SeedStreams::new(seed);
    let mut perm_epoch = u64::MAX;
    let mut perm: Vec<usize> = Vec::new();
    (0..batch)
        .map(|i| {
            let g = (step - 1) * batch as u64 + i as u64;
            let epoch = g / n_rows as u64;
            if epoch != perm_epoch {
                perm = (0..n_rows).collect();
                perm.shuffle(&mut streams.stream("data", epoch));
                perm_epoch = epoch;
            }
            perm[(g % n_rows as u64) as usize]
        })
        .collect()
}

pub struct Trainer {
    pub model: Model,
    pub optimizer: OptimizerState,
    pub cfg: TrainConfig,
    pub adafactor: Adafactor,
    step: u64,
    tokens_seen: u64,
    train_flops: f64,
    started: Instant,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Self {
        let optimizer = OptimizerState::new(&model.params);
        Self {
            model,
            optimizer,
            cfg,
            adafactor: Adafactor::default(),
            step: 0,
            tokens_seen: 0,
            train_flops: 0.0,
            started: Instant::now(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint, cfg: TrainConfig) -> Self {
        Self {
            model: ckpt.model,
            optimizer: ckpt.optimizer,
            cfg,
            adafactor: Adafactor::default(),
            step: ckpt.meta.step,
            tokens_seen: ckpt.meta.tokens_seen,
            train_flops: ckpt.meta.train_flops,
            started: Instant::now(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn train_flops(&self) -> f64 {
        self.train_flops
    }

    /// One optimizer update on `rows`.
    pub fn train_step(&mut self, rows: &[Row]) -> Result<TrainLogRow> {
        if rows.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let step = self.step + 1;
        let mut g = Graph::new();
        let mut drop_rng = SeedStreams::new(self.cfg.seed).stream("dropout", step);
        let mut logits = Vec::with_capacity(rows.len());
        let mut targets = Vec::new();
        let mut mask = Vec::new();
        let mut flops = 0.0;
        let nan = |e: Error| match e {
            Error::NonFinite { .. } => Error::NanLoss { step },
            e => e,
        };
        for row in rows {
            let dropout = (self.cfg.dropout > 0.0).then_some(Dropout { rate: self.cfg.dropout, rng: &mut drop_rng });
            let mut opts = ForwardOptions { dropout, ..Default::default() };
            let r = row_logits(&mut g, &self.model, row, self.cfg.bidirectional, &mut opts).map_err(nan)?;
            flops += flops_per_sequence(&self.model.cfg, r.shape, FlopsMode::Train)?;
            logits.push(r.logits);
            targets.extend(r.targets);
            mask.extend(r.mask);
        }
        let all = g.concat_rows(&logits)?;
        let (loss, parts) = g.lm_loss(&all, &targets, &mask, self.cfg.z_loss).map_err(nan)?;
        if !parts.total().is_finite() {
            return Err(Error::NanLoss { step });
        }
        g.backward(&loss)?;
        let mut grads = Grads::zeros_like(&self.model.params);
        g.accumulate_param_grads(&mut grads);
        drop(g);
        for ((_, name, _), gr) in self.model.params.iter().zip(grads.iter()) {
            if gr.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient(name.to_string()));
            }
        }
        let grad_norm = clip_grads(&mut grads, self.cfg.clip_norm);
        let lr = self.cfg.schedule.lr(step);
        self.adafactor.step(&mut self.model.params, &grads, &mut self.optimizer, lr)?;

        self.step = step;
        self.tokens_seen += parts.tokens as u64;
        self.train_flops += flops;
        let wall_seconds = if self.cfg.wall_clock { self.started.elapsed().as_secs_f64() } else { 0.0 };
        Ok(TrainLogRow {
            step,
            loss: parts.total(),
            z_loss: parts.z_loss,
            lr,
            grad_norm,
            tokens_seen: self.tokens_seen,
            train_flops: self.train_flops,
            wall_seconds,
        })
    }

    pub fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            step: self.step,
            model: self.model.cfg.clone(),
            seed: self.cfg.seed,
            tokens_seen: self.tokens_seen,
            train_flops: self.train_flops,
            optimizer_step: self.optimizer.step,
        }
    }

    pub fn save(&self, run_dir: &Path) -> Result<PathBuf> {
        save_checkpoint(run_dir, &self.model, &self.optimizer, &self.meta(), self.cfg.checkpoint_dtype)
    }

    /// Trains until `cfg.steps` (or the early-stop loss), drawing batches from
    /// `data` by [`batch_indices`]. With a run directory, appends to its CSV
    /// log and writes checkpoints there.
    pub fn run(&mut self, data: &[Row], run_dir: Option<&Path>) -> Result<Vec<TrainLogRow>> {
        if data.is_empty() {
            return Err(Error::Input("no training rows".into()));
        }
        let mut log = match run_dir {
            Some(dir) => Some(open_log(dir, self.step)?),
            None => None,
        };
        let mut rows_out = Vec::new();
        while self.step < self.cfg.steps {
            let idx = batch_indices(self.cfg.seed, data.len(), self.step + 1, self.cfg.batch_size);
            let batch: Vec<Row> = idx.into_iter().map(|i| data[i].clone()).collect();
            let row = self.train_step(&batch)?;
            log::debug!("step {} loss {:.5} lr {:.3e}", row.step, row.loss, row.lr);
            if let Some(w) = log.as_mut() {
                w.serialize(&row)?;
                w.flush()?;
            }
            let stop = self.cfg.stop_below.is_some_and(|t| row.loss < t);
            rows_out.push(row);
            let periodic = self.cfg.checkpoint_every > 0 && self.step.is_multiple_of(self.cfg.checkpoint_every);
            if let Some(dir) = run_dir {
                if periodic || stop || self.step == self.cfg.steps {
                    self.save(dir)?;
                }
            }
            if stop {
                break;
            }
        }
        Ok(rows_out)
    }
}

/// Opens the CSV log for appending, dropping rows past `resume_step` left by
/// an interrupted run.
fn open_log(dir: &Path, resume_step: u64) -> Result<csv::Writer<std::fs::File>> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(LOG_FILE);
    let mut kept: Vec<TrainLogRow> = Vec::new();
    if resume_step > 0 && path.is_file() {
        let mut r = csv::Reader::from_path(&path)?;
        for row in r.deserialize() {
            let row: TrainLogRow = row?;
            if row.step <= resume_step {
                kept.push(row);
            }
        }
    }
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(&path)?;
    w.write_record(LOG_HEADER.split(','))?;
    for row in &kept {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(w)
}
