//! Stage orchestration: source training, black-box distillation, two-view
//! distillation, and the end-to-end experiment runner.

mod config;
mod experiment;
mod train;

pub use config::{
    AugmentationSection, DataConfig, ExperimentConfig, OptimizerSection, ResumeSection, SeedSection, StageSection,
};
pub use experiment::{
    run_experiment, write_manifest, write_stage_report, ExperimentOutcome, Manifest, MetricRow, MANIFEST, METRICS_JSON, METRICS_MD, PSEUDO_LABEL_FILE,
};
pub use train::{
    train_source, train_stage1, train_stage2, CheckpointPlan, Stage2Options, StageId, StageReport,
};
