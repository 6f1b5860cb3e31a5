//! End-to-end benchmark: configuration, staged pipeline and report.

pub mod config;
pub mod pipeline;
pub mod report;

pub use config::{RunConfig, Variant};
pub use pipeline::{run_pipeline, Metric, Mode, Run, RunManifest};
