//! Training, evaluation, checkpointing and ablation of the two-branch model.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod model;
pub mod train;

pub use ablate::{ablate, ablation_csv, AblationGrid, AblationRow, GridAxes, GridCell};
pub use checkpoint::Checkpoint;
pub use config::{AblationFlags, LossConfig, ModelConfig, OptimConfig, RunConfig, SeedSource, SEED_ENV};
pub use metrics::{metrics_jsonl, parse_metrics, write_metrics, MetricsRecord};
pub use model::{Model, ModelGroups};
pub use train::{
    evaluate_model, train, train_branches, Branches, StepEvent, StepReport, StepTerms, TrainRun, Trainer,
};
