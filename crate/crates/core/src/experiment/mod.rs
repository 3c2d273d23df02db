//! Hyperparameter sweeps, the staged pipeline and its synthetic fixture.

pub mod fixture;
pub mod pipeline;
pub mod sweep;

pub use fixture::{write_fixture, FixturePaths, FixtureSpec};
pub use pipeline::{run_pipeline, run_pipeline_config, Layout, PipelineConfig, PipelineOptions, PipelineReport, StageStatus};
pub use sweep::{
    apply_overrides, replay_log, run_sweep, select_best, Distribution, RunRecord, SweepOptions, SweepResult, SweepSpace,
    TrainerKind, Trial, TrialOutcome,
};
