//! Run orchestration: presets, the training loop, artifact files, and the
//! analyses built on top of them.

mod analysis;
mod artifacts;
mod config;
mod runner;

pub use analysis::{
    compare_runs, eval_points, phase_event_counts, recovery_analysis, recovery_steps,
    shift_shapes, smooth_loss, speedup_ratio, Comparison, PhaseCount, RecoveryReport, RunSummary,
    ShiftShape,
};
pub use artifacts::{
    census_from_jsonl, census_to_jsonl, events_from_jsonl, events_to_jsonl, load_run_dir,
    loss_from_csv, loss_to_csv, write_run_dir, ABORT_FILE, CENSUS_FILE, CONFIG_FILE, EVENTS_FILE,
    LOSS_FILE,
};
pub use config::{DomainSource, DomainSpec, RunConfig, ShiftPoint, PRESET_NAMES};
pub use runner::{run_experiment, LossPoint, RunArtifacts};
