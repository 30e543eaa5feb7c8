//! Metrics and experiment orchestration.

mod experiment;
mod metrics;

pub use metrics::{
    confusion, confusion_masked, distribution_shift_report, iou_per_class, miou, miou_excluding, ConfusionMatrix,
    ShiftReport, ShiftRow,
};
pub use experiment::{
    attack_sources, build_domains, clean_patches, evaluate, label_stats, pretrain, run_experiment, run_seed, train_scene_decoder, tune_lambda,
    CellResult,
    DataSource, Domains, ExperimentConfig, ExperimentResult, Row, SeedResult, Toggles,
};
