//! Experiment specification documents.
//!
//! A spec is a flat TOML document (JSON with the same keys is also
//! accepted). Keys that do not apply to the chosen `kind` are rejected, as
//! are unknown keys. Every omitted key takes the documented default, and
//! [`dump_spec`] writes the fully populated form back out.
//!
//! ```toml
//! name = "online-mab"
//! kind = "online-mab"        # online-mab | online-contextual | offline-mab | offline-contextual
//! seeds = [0, 1, 2]          # default 0..=9
//! output = "results/online-mab"
//! beta = 1.0
//! arm_count = 10
//! iterations = 1000          # online only
//! batch_size = 5             # online only
//! inner_steps = 20           # online only
//!
//! [optimizer]
//! lr = 0.01
//! weight_decay = 0.01
//!
//! [[algorithm]]
//! id = "mle"
//! alpha = 0.0
//!
//! [[algorithm]]
//! id = "vpo"
//! alpha = 0.1
//! ```
//!
//! Offline kinds take `dataset_sizes`, `total_steps` and `behavior`
//! instead of the three online keys. Contextual kinds additionally take
//! `context_dim`, `feature_dim` and `eval_batch_size`.

use std::collections::HashSet;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::algorithms::{CalibrationSource, EnvSpec, RegContextSource};
use crate::error::{Result, VpoError};
use crate::optimizer::AdamWConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    OnlineMab,
    OnlineContextual,
    OfflineMab,
    OfflineContextual,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::OnlineMab => "online-mab",
            ExperimentKind::OnlineContextual => "online-contextual",
            ExperimentKind::OfflineMab => "offline-mab",
            ExperimentKind::OfflineContextual => "offline-contextual",
        }
    }

    pub fn is_online(self) -> bool {
        matches!(self, ExperimentKind::OnlineMab | ExperimentKind::OnlineContextual)
    }

    pub fn is_contextual(self) -> bool {
        matches!(self, ExperimentKind::OnlineContextual | ExperimentKind::OfflineContextual)
    }
}

/// One compared method: VPO at a given `α`, with `α = 0` the MLE baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmSpec {
    pub id: String,
    pub alpha: f64,
}

/// Offline data-collection policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BehaviorSpec {
    #[default]
    Reference,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextShape {
    pub context_dim: usize,
    pub feature_dim: usize,
    pub eval_batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Schedule {
    Online {
        iterations: usize,
        batch_size: usize,
        inner_steps: usize,
    },
    Offline {
        dataset_sizes: Vec<usize>,
        total_steps: usize,
        behavior: BehaviorSpec,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub name: String,
    pub kind: ExperimentKind,
    pub arm_count: usize,
    /// Present exactly for contextual kinds.
    pub context: Option<ContextShape>,
    pub schedule: Schedule,
    pub beta: f64,
    pub optimizer: AdamWConfig,
    pub calibration: CalibrationSource,
    pub reg_context_source: RegContextSource,
    pub seeds: Vec<u64>,
    pub output: PathBuf,
    pub algorithms: Vec<AlgorithmSpec>,
}

/// A validated spec plus any warnings raised while filling defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedSpec {
    pub spec: ExperimentSpec,
    pub warnings: Vec<String>,
}

/// On-disk form. Every key is optional so defaults can depend on `kind`.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecDocument {
    #[serde(skip_serializing_if = "Option::is_none")]
    name: Option<String>,
    kind: Option<ExperimentKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seeds: Option<Vec<u64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    output: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    beta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    arm_count: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    context_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    feature_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    eval_batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    iterations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    inner_steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    dataset_sizes: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    total_steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    behavior: Option<BehaviorSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    calibration: Option<CalibrationSource>,
    #[serde(skip_serializing_if = "Option::is_none")]
    reg_context_source: Option<RegContextSource>,
    #[serde(skip_serializing_if = "Option::is_none")]
    optimizer: Option<AdamWConfig>,
    #[serde(rename = "algorithm", default, skip_serializing_if = "Vec::is_empty")]
    algorithms: Vec<AlgorithmSpec>,
}

pub const DEFAULT_SEED_COUNT: u64 = 10;
pub const DEFAULT_DATASET_SIZES: [usize; 5] = [10, 50, 100, 500, 1000];
pub const DEFAULT_EVAL_BATCH_SIZE: usize = 512;

fn spec_error(key: &str, constraint: impl Into<String>) -> VpoError {
    VpoError::Spec {
        key: key.to_string(),
        constraint: constraint.into(),
    }
}

/// Parses a TOML or JSON spec document. A document whose first
/// non-whitespace character is `{` is read as JSON.
pub fn parse_spec(text: &str) -> Result<ParsedSpec> {
    let doc: SpecDocument = if text.trim_start().starts_with('{') {
        serde_json::from_str(text).map_err(|e| VpoError::Config(format!("spec JSON: {e}")))?
    } else {
        toml::from_str(text).map_err(|e| VpoError::Config(format!("spec TOML: {e}")))?
    };
    resolve(doc)
}

fn resolve(doc: SpecDocument) -> Result<ParsedSpec> {
    let mut warnings = Vec::new();
    let kind = doc.kind.ok_or_else(|| spec_error("kind", "required"))?;
    let forbid = |present: bool, key: &str, applies: &str| -> Result<()> {
        if present {
            Err(spec_error(key, format!("applies only to {applies} experiments, not {}", kind.name())))
        } else {
            Ok(())
        }
    };

    let context = if kind.is_contextual() {
        Some(ContextShape {
            context_dim: doc.context_dim.unwrap_or(2),
            feature_dim: doc.feature_dim.unwrap_or(10),
            eval_batch_size: doc.eval_batch_size.unwrap_or(DEFAULT_EVAL_BATCH_SIZE),
        })
    } else {
        forbid(doc.context_dim.is_some(), "context_dim", "contextual")?;
        forbid(doc.feature_dim.is_some(), "feature_dim", "contextual")?;
        forbid(doc.eval_batch_size.is_some(), "eval_batch_size", "contextual")?;
        None
    };

    let schedule = if kind.is_online() {
        forbid(doc.dataset_sizes.is_some(), "dataset_sizes", "offline")?;
        forbid(doc.total_steps.is_some(), "total_steps", "offline")?;
        forbid(doc.behavior.is_some(), "behavior", "offline")?;
        Schedule::Online {
            iterations: doc.iterations.unwrap_or(1000),
            batch_size: doc.batch_size.unwrap_or(5),
            inner_steps: doc.inner_steps.unwrap_or(20),
        }
    } else {
        forbid(doc.iterations.is_some(), "iterations", "online")?;
        forbid(doc.batch_size.is_some(), "batch_size", "online")?;
        forbid(doc.inner_steps.is_some(), "inner_steps", "online")?;
        Schedule::Offline {
            dataset_sizes: doc.dataset_sizes.unwrap_or_else(|| DEFAULT_DATASET_SIZES.to_vec()),
            total_steps: doc.total_steps.unwrap_or(1000),
            behavior: doc.behavior.unwrap_or_default(),
        }
    };

    let seeds = doc.seeds.unwrap_or_else(|| {
        let msg = format!("`seeds` not given; using 0..{}", DEFAULT_SEED_COUNT);
        log::warn!("{msg}");
        warnings.push(msg);
        (0..DEFAULT_SEED_COUNT).collect()
    });
    let name = doc.name.unwrap_or_else(|| kind.name().to_string());
    let spec = ExperimentSpec {
        output: doc.output.unwrap_or_else(|| PathBuf::from("results").join(&name)),
        name,
        kind,
        arm_count: doc.arm_count.unwrap_or(if kind.is_contextual() { 50 } else { 10 }),
        context,
        schedule,
        beta: doc.beta.unwrap_or(if kind.is_contextual() { 5.0 } else { 1.0 }),
        optimizer: doc.optimizer.unwrap_or_default(),
        calibration: doc.calibration.unwrap_or_default(),
        reg_context_source: doc.reg_context_source.unwrap_or_default(),
        seeds,
        algorithms: doc.algorithms,
    };
    spec.validate()?;
    Ok(ParsedSpec { spec, warnings })
}

fn check_id(key: &str, id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.');
    if ok {
        Ok(())
    } else {
        Err(spec_error(key, format!("non-empty and made of [A-Za-z0-9._-] (got {id:?})")))
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        check_id("name", &self.name)?;
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(spec_error("beta", format!("beta > 0 (got {})", self.beta)));
        }
        if self.arm_count < 2 {
            return Err(spec_error("arm_count", format!("arm_count >= 2 (got {})", self.arm_count)));
        }
        if self.context.is_some() != self.kind.is_contextual() {
            return Err(spec_error("kind", "context shape must be given exactly for contextual kinds"));
        }
        if let Some(c) = &self.context {
            for (key, v) in [
                ("context_dim", c.context_dim),
                ("feature_dim", c.feature_dim),
                ("eval_batch_size", c.eval_batch_size),
            ] {
                if v == 0 {
                    return Err(spec_error(key, format!("{key} >= 1")));
                }
            }
        }
        match (&self.schedule, self.kind.is_online()) {
            (
                Schedule::Online {
                    iterations,
                    batch_size,
                    inner_steps,
                },
                true,
            ) => {
                for (key, v) in [
                    ("iterations", *iterations),
                    ("batch_size", *batch_size),
                    ("inner_steps", *inner_steps),
                ] {
                    if v == 0 {
                        return Err(spec_error(key, format!("{key} >= 1")));
                    }
                }
            }
            (
                Schedule::Offline {
                    dataset_sizes,
                    total_steps,
                    ..
                },
                false,
            ) => {
                if dataset_sizes.is_empty()
                    || dataset_sizes[0] == 0
                    || dataset_sizes.windows(2).any(|w| w[0] >= w[1])
                {
                    return Err(spec_error("dataset_sizes", "non-empty, positive and strictly increasing"));
                }
                if *total_steps == 0 {
                    return Err(spec_error("total_steps", "total_steps >= 1"));
                }
            }
            _ => return Err(spec_error("kind", "schedule does not match the experiment kind")),
        }
        self.optimizer
            .validate()
            .map_err(|e| spec_error("optimizer", e.to_string()))?;
        if self.seeds.is_empty() {
            return Err(spec_error("seeds", "at least one seed"));
        }
        let mut seen = HashSet::new();
        for &s in &self.seeds {
            if s > i64::MAX as u64 {
                return Err(spec_error("seeds", format!("seeds < 2^63 (got {s})")));
            }
            if !seen.insert(s) {
                return Err(spec_error("seeds", format!("distinct (seed {s} repeats)")));
            }
        }
        if self.algorithms.is_empty() {
            return Err(spec_error("algorithm", "at least one [[algorithm]] section"));
        }
        let mut ids = HashSet::new();
        for a in &self.algorithms {
            check_id("algorithm.id", &a.id)?;
            if !ids.insert(a.id.as_str()) {
                return Err(spec_error("algorithm.id", format!("distinct (id {:?} repeats)", a.id)));
            }
            if !(a.alpha >= 0.0 && a.alpha.is_finite()) {
                return Err(spec_error("algorithm.alpha", format!("alpha >= 0 (got {})", a.alpha)));
            }
        }
        Ok(())
    }

    pub fn env_spec(&self) -> EnvSpec {
        match &self.context {
            Some(c) => EnvSpec::contextual(c.context_dim, self.arm_count, c.feature_dim),
            None => EnvSpec::mab(self.arm_count),
        }
    }

    pub fn eval_batch_size(&self) -> usize {
        self.context.map_or(1, |c| c.eval_batch_size)
    }

    /// Same spec with every seed shifted by `offset`.
    pub fn with_seed_offset(mut self, offset: u64) -> Result<Self> {
        for s in &mut self.seeds {
            *s = s
                .checked_add(offset)
                .ok_or_else(|| spec_error("seeds", "seed + seed offset overflows"))?;
        }
        self.validate()?;
        Ok(self)
    }

    /// The default online bandit experiment: `K = 10`, `β = 1`,
    /// `M = 5`, 20 AdamW steps per iteration, `T = 1000`, ten seeds, and
    /// the MLE baseline against VPO at `α ∈ {0.01, 0.1, 1}`.
    pub fn online_mab_default() -> Self {
        let doc = SpecDocument {
            kind: Some(ExperimentKind::OnlineMab),
            seeds: Some((0..DEFAULT_SEED_COUNT).collect()),
            algorithms: default_algorithms(),
            ..SpecDocument::default()
        };
        resolve(doc).expect("default spec is valid").spec
    }
}

fn default_algorithms() -> Vec<AlgorithmSpec> {
    [("mle", 0.0), ("vpo-0.01", 0.01), ("vpo-0.1", 0.1), ("vpo-1", 1.0)]
        .into_iter()
        .map(|(id, alpha)| AlgorithmSpec {
            id: id.to_string(),
            alpha,
        })
        .collect()
}

/// Normalized TOML form with every applicable key written out.
pub fn dump_spec(spec: &ExperimentSpec) -> Result<String> {
    let mut doc = SpecDocument {
        name: Some(spec.name.clone()),
        kind: Some(spec.kind),
        seeds: Some(spec.seeds.clone()),
        output: Some(spec.output.clone()),
        beta: Some(spec.beta),
        arm_count: Some(spec.arm_count),
        calibration: Some(spec.calibration),
        reg_context_source: Some(spec.reg_context_source),
        optimizer: Some(spec.optimizer),
        algorithms: spec.algorithms.clone(),
        ..SpecDocument::default()
    };
    if let Some(c) = spec.context {
        doc.context_dim = Some(c.context_dim);
        doc.feature_dim = Some(c.feature_dim);
        doc.eval_batch_size = Some(c.eval_batch_size);
    }
    match &spec.schedule {
        Schedule::Online {
            iterations,
            batch_size,
            inner_steps,
        } => {
            doc.iterations = Some(*iterations);
            doc.batch_size = Some(*batch_size);
            doc.inner_steps = Some(*inner_steps);
        }
        Schedule::Offline {
            dataset_sizes,
            total_steps,
            behavior,
        } => {
            doc.dataset_sizes = Some(dataset_sizes.clone());
            doc.total_steps = Some(*total_steps);
            doc.behavior = Some(*behavior);
        }
    }
    toml::to_string(&doc).map_err(|e| VpoError::Config(format!("spec serialization: {e}")))
}
