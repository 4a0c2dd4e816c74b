//! Synthetic camera source, stage orchestration and the loaned-versus-copy
//! benchmark for the perception pipeline.

pub mod bench;
pub mod check;
mod error;
pub mod link;
pub mod messages;
pub mod pipeline;
pub mod report;
pub mod scene;
pub mod stage;

pub use bench::{run_bench, BenchOptions, BenchReport};
pub use error::{HarnessError, Result};
pub use link::TransportKind;
pub use pipeline::{run_pipeline, run_probe, write_csv, PipelineConfig, RunResult, StageSet};
pub use report::{summarize, StageSummary};
pub use scene::{generate_scene, Scene, SceneSpec};
pub use stage::{run_stage, BenchRecord, StageKind, StageReport};
