//! Training, evaluation, checkpoints and gradient verification.

mod checkpoint;
mod config;
pub mod gradcheck;
mod metrics;
mod prepare;
mod trainer;

pub use checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};
pub use config::{Protocol, ResolvedSplit, SplitConfig, TrainConfig};
pub use gradcheck::{model_grad_check, GradCheckReport, GroupCheck};
pub use metrics::{compute_metrics, Metrics, Scored, SliceMetrics};
pub use prepare::{frames, model_inputs, position_origin, predict_inputs, Prepared, EVAL_CHUNK};
pub use trainer::{evaluate, persistence_forecast, score, train, EpochRecord, EvalReport, Trainer};
