use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Grads, Params};

/// Unfactored Adafactor without first moment or parameter scaling.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adafactor {
    /// Exponent of the second-moment decay `1 - t^-decay`.
    pub decay: f64,
    /// Added to squared gradients.
    pub eps: f64,
    /// Updates are rescaled so their RMS never exceeds this.
    pub clip_threshold: f64,
}

impl Default for Adafactor {
    fn default() -> Self {
        Self { decay: 0.8, eps: 1e-30, clip_threshold: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    /// Second-moment estimate, one buffer per parameter tensor.
    pub v: Vec<Vec<f64>>,
    /// Number of completed updates.
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &Params) -> Self {
        Self { v: params.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect(), step: 0 }
    }
}

impl Adafactor {
    /// One update. Nothing is modified when a gradient is non-finite.
    pub fn step(&self, params: &mut Params, grads: &Grads, state: &mut OptimizerState, lr: f64) -> Result<()> {
        if state.v.len() != params.len() {
            return Err(Error::Config("optimizer state does not match the parameter set".into()));
        }
        for ((id, name, t), g) in params.iter().zip(grads.iter()) {
            if g.len() != t.numel() || state.v[id.0].len() != t.numel() {
                return Err(Error::shape("adafactor", format!("{name}: gradient or state size mismatch")));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient(name.to_string()));
            }
        }
        let t = (state.step + 1) as f64;
        let beta = 1.0 - t.powf(-self.decay);
        let ids: Vec<_> = params.ids().collect();
        for (id, g) in ids.into_iter().zip(grads.iter()) {
            let v = &mut state.v[id.0];
            let mut u = Vec::with_capacity(g.len());
            for (vi, gi) in v.iter_mut().zip(g) {
                *vi = beta * *vi + (1.0 - beta) * (gi * gi + self.eps);
                u.push(gi / vi.sqrt());
            }
            let rms = (u.iter().map(|x| x * x).sum::<f64>() / u.len().max(1) as f64).sqrt();
            let denom = (rms / self.clip_threshold).max(1.0);
            for (p, ui) in params.get_mut(id).data_mut().iter_mut().zip(&u) {
                *p -= lr * ui / denom;
            }
        }
        state.step += 1;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    /// Linear warmup to `peak`, then cosine decay to `peak * floor_ratio`
    /// at `total_steps`, held there afterwards.
    WarmupCosine { warmup: u64, total_steps: u64, peak: f64, floor_ratio: f64 },
    Constant { lr: f64 },
}

impl LrSchedule {
    pub const PRETRAIN_WARMUP: u64 = 2000;
    pub const PRETRAIN_PEAK: f64 = 0.01;
    pub const PRETRAIN_FLOOR_RATIO: f64 = 0.1;
    pub const FINETUNE_LR: f64 = 0.001;

    pub fn pretrain(total_steps: u64) -> Self {
        Self::WarmupCosine {
            warmup: Self::PRETRAIN_WARMUP,
            total_steps,
            peak: Self::PRETRAIN_PEAK,
            floor_ratio: Self::PRETRAIN_FLOOR_RATIO,
        }
    }

    pub fn finetune() -> Self {
        Self::Constant { lr: Self::FINETUNE_LR }
    }

    pub fn lr(&self, step: u64) -> f64 {
        match *self {
            Self::Constant { lr } => lr,
            Self::WarmupCosine { warmup, total_steps, peak, floor_ratio } => {
                let floor = peak * floor_ratio;
                if step < warmup {
                    return peak * step as f64 / warmup as f64;
                }
                if step >= total_steps {
                    return if total_steps <= warmup { peak } else { floor };
                }
                let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
                peak - (peak - floor) * 0.5 * (1.0 - (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

/// Scales gradients to global L2 norm `max_norm` when above it. Returns the
/// norm before clipping.
pub fn clip_grads(grads: &mut Grads, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}
