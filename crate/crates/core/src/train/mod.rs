//! Optimization: schedule, AdamW, checkpoints and the staged trainer.

pub mod checkpoint;
pub mod optim;
pub mod schedule;
pub mod trainer;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::{clip_grad_norm, AdamW, Moments, OptimConfig};
pub use schedule::lr_at;
pub use trainer::{
    checkpoint_path, run_pipeline, run_stage, step_loss, validate_stages, write_metrics, MetricRecord, PipelineOptions,
    PipelineReport, StageConfig, StageName, StageRun, TrainData, DESK_STAGE_STEPS, FULL_STAGE_STEPS, METRICS_HEADER,
};
