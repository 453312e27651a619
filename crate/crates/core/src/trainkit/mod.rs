//! Optimisation, training loop and checkpoints.

mod checkpoint;
mod optim;
pub(crate) mod train;

pub use checkpoint::{Checkpoint, ParamBlob, RngState, MAGIC, VERSION};
pub use optim::{clip_grad_norm, grad_norm, AdamConfig, AdamW, Moments};
pub use train::{bind_vocab, objective, train, trainable_partition, Ablations, Batch, StepRecord, TrainConfig, TrainOutcome, Trainer};
