//! Metrics, trajectory recording, experiment presets and runners.

pub mod check;
pub mod experiment;
pub mod metrics;
pub mod presets;
pub mod record;

pub use experiment::{run_experiment, ExperimentOptions, ExperimentOutcome};
pub use metrics::{deviation_w, lyapunov_v, workload_share, WorkloadShare};
pub use record::{Sample, TrajectoryRecord};
