//! Joint training over single-task mini-batches, fine-tuning and evaluation.

mod batching;
mod config;
mod metrics;
mod trainer;

pub use batching::{merge_shuffle, pack_batches, steps_per_epoch, MiniBatch};
pub use config::TrainConfig;
pub use metrics::{evaluate, evaluate_encoded, metrics_from_predictions, write_metrics_csv, MetricRow, Metrics};
pub use trainer::{batch_gradients, finetune, train_mtl, train_step, EpochReport, Progress, Trainer};
