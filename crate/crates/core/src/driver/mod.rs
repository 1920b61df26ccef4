//! Experiment runners: the active-learning loop, run directories and sweeps.

pub mod artifacts;
pub mod config;
pub mod experiment;
pub mod sweep;

pub use artifacts::{MetricsRow, RunDir, RunReport, METRICS_COLUMNS};
pub use config::{AnnotatorKind, ExperimentConfig, StrategySpec};
pub use experiment::{resume_experiment, run_experiment, Data, Experiment, Plan};
pub use sweep::{add_soft_reports, run_sweep, SoftReport, SweepRun, SweepSummary};

/// Directory holding run directories; `APIS_RUN_ROOT` overrides `runs`.
pub fn run_root() -> std::path::PathBuf {
    std::env::var_os("APIS_RUN_ROOT").map_or_else(|| "runs".into(), Into::into)
}
