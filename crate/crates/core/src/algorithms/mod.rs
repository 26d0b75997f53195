//! Online and offline VPO loops, their MLE baselines (`α = 0`), and
//! numerical checks of the saddle-point property and the Hellinger bound.

mod offline;
mod online;
mod setup;
mod trace;
mod verify;

pub use offline::{generate_offline_dataset, run_offline, run_offline_sweep, OfflineRunConfig};
pub use online::{run_online, OnlineRunConfig};
pub use setup::{build_run, CalibrationSource, EnvSpec, RegContextSource, RunSetup};
pub use trace::{MetricKind, MetricsTrace, RunFailure, TraceRecord};
pub use verify::{
    check_hellinger_bound, check_saddle_point, converge_offline_tabular, saddle_objective, ConvergedOffline,
    HellingerReport, SaddleReport,
};
