//! Optimisation, evaluation metrics and model persistence.

pub mod adam;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod loss;
pub mod metrics;
pub mod schedule;
pub mod trainer;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{load_model, save_model};
pub use config::{OptimizerKind, TrainConfig};
pub use data::{Dataset, Sample};
pub use loss::{mse_loss, mse_loss_backward};
pub use metrics::{compute_metrics, MetricsReport};
pub use schedule::{EarlyStopState, SchedulerState, StopDecision};
pub use trainer::{predict_indices, train, train_with_progress, EpochRecord, History, TrainOutcome};
