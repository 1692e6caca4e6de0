//! Loss, optimizer, training loop and checkpoints.

pub mod checkpoint;
pub mod loss;
pub mod optim;
pub mod trainer;

pub use checkpoint::{backbone_bytes, segment_bytes, stored_dtype, Checkpoint, RngState};
pub use loss::{bce_loss, combine_losses, total_loss, LossConfig, Reduction, BCE_EPS};
pub use optim::{sgd_step, OptimizerConfig, Sgd};
pub use trainer::{make_batch, StepRecord, Strategy, TrainConfig, TrainLog, Trainer};
