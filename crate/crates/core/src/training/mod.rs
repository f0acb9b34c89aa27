//! Losses, unfactored Adafactor, the learning-rate schedule, gradient
//! clipping, the training loop and checkpoints.

pub mod checkpoint;
mod optim;
mod trainer;

pub use crate::numerics::kernels::{lm_loss, LossParts};
pub use checkpoint::{latest_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, DType};
pub use optim::{clip_grads, Adafactor, LrSchedule, OptimizerState};
pub use trainer::{
    batch_indices, corpus_loss, row_logits, RowLogits, TrainConfig, TrainLogRow, Trainer, FINETUNE_DROPOUT, GRAD_CLIP, LOG_FILE,
    LOG_HEADER, Z_LOSS_COEF,
};

#[cfg(test)]
mod tests;
