use serde::{Deserialize, Serialize};

use crate::numerics::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    CumulativeRegret,
    SuboptimalityGap,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::CumulativeRegret => "cumulative_regret",
            MetricKind::SuboptimalityGap => "suboptimality_gap",
        }
    }
}

/// One checkpoint: iteration count (online) or dataset size (offline).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct TraceRecord<T> {
    pub x: u64,
    /// Cumulative regret or sub-optimality gap.
    pub metric: T,
    /// Per-iteration regret (online only).
    pub instantaneous: Option<T>,
    /// Training loss at the last optimizer step (online) or at the final
    /// parameters (offline).
    pub loss: T,
    /// Training loss at the first optimizer step (offline only).
    pub first_loss: Option<T>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunFailure {
    /// Iteration (online) or dataset size (offline) that failed.
    pub at: u64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct MetricsTrace<T> {
    pub kind: MetricKind,
    pub records: Vec<TraceRecord<T>>,
    pub wall_time_secs: f64,
    pub failure: Option<RunFailure>,
}

impl<T: Scalar> MetricsTrace<T> {
    pub fn new(kind: MetricKind) -> Self {
        Self {
            kind,
            records: Vec::new(),
            wall_time_secs: 0.0,
            failure: None,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.failure.is_none()
    }

    /// Final metric value, `0` for an empty trace.
    pub fn last_metric(&self) -> T {
        self.records.last().map_or(T::zero(), |r| r.metric)
    }

    pub fn metric_at(&self, x: u64) -> Option<T> {
        self.records.iter().find(|r| r.x == x).map(|r| r.metric)
    }
}
