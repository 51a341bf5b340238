//! Dequantization, objectives, the training loop and checkpoints.

mod checkpoint;
mod dequant;
pub mod gradcheck;
mod objective;
mod trainer;

pub use checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};
pub use dequant::{
    dequantize, dequantize_with_noise, to_pixels, uniform_scale_logdet, DataSource,
    DEFAULT_LOGIT_ALPHA,
};
pub use objective::{
    contrastive_objective, contrastive_on, log_prob_with_offsets, mle_loss, mle_loss_on,
};
pub use trainer::{
    train, write_metrics, MetricRow, Objective, TrainConfig, TrainOutcome, METRIC_HEADER,
};
