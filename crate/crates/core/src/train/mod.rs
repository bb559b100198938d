//! Optimization, evaluation and size-curve reporting.

mod adamw;
mod config;
mod metrics;
mod trainer;

pub use adamw::{adamw_step, clip_grad_norm, grad_norm, AdamW};
pub use config::{TargetMode, TrainConfig};
pub use metrics::{
    evaluate, evaluate_sizes, ndcg_at, popularity_baseline, rank_of, rank_targets, recall_at,
    EvalOptions, Metrics, MetricsReport, METRIC_NAMES,
};
pub use trainer::{
    extract_all, history_tsv, size_curve, train, train_step, training_batch, EarlyStopper,
    EpochRecord, StopReason, TrainOutcome, Verdict,
};
