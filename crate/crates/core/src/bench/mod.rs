//! Experiment runner: configuration, metrics and the staged KO and reservoir
//! pipelines.

pub mod config;
pub mod metrics;
pub mod pipeline;

pub use config::{Condition, ExperimentConfig, ExperimentKind, Stage};
pub use metrics::{
    length_scale, min_l2_error, relative_error, relative_variation, MetricReport, ScaleMode,
};
pub use pipeline::{run_pipeline, Pipeline, StageManifest, StageOutcome};
