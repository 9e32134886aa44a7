//! Optimisation, checkpoints, and the evaluation driver.

mod checkpoint;
mod config;
mod eval;
mod optim;
mod trainer;

pub use checkpoint::{BestMetric, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{Selection, TrainConfig};
pub use eval::{evaluate, evaluate_with, predict, Evaluation, Inference, PairOutput, INFERENCE_CHUNK};
pub use optim::{clip_global_norm, cosine_lr, global_norm, Adam, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use trainer::{best_path, last_path, log_path, loss_and_grads, train, EpochLog, RunOptions, StepStats, TrainSummary, Trainer};

#[cfg(test)]
mod tests;
