use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::environments::{make_contextual_env, make_mab_env, EnvKind, Environment};
use crate::error::{invalid, Result};
use crate::losses::{Calibration, RegContexts};
use crate::numerics::{Scalar, SeededRng, Stream};
use crate::policy_value::{ContextBatch, Policy};

/// Shape of a synthetic environment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub kind: EnvKind,
    pub arm_count: usize,
    /// Prompt dimension (contextual only).
    pub context_dim: usize,
    /// Feature dimension `d` (contextual only).
    pub feature_dim: usize,
}

impl EnvSpec {
    pub fn mab(arm_count: usize) -> Self {
        Self {
            kind: EnvKind::Mab,
            arm_count,
            context_dim: 0,
            feature_dim: 0,
        }
    }

    pub fn contextual(context_dim: usize, arm_count: usize, feature_dim: usize) -> Self {
        Self {
            kind: EnvKind::Contextual,
            arm_count,
            context_dim,
            feature_dim,
        }
    }
}

/// Calibration policy choice for the regularizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationSource {
    #[default]
    Reference,
    EmpiricalPositive,
}

impl CalibrationSource {
    pub fn to_calibration<T>(self) -> Calibration<T> {
        match self {
            CalibrationSource::Reference => Calibration::Reference,
            CalibrationSource::EmpiricalPositive => Calibration::EmpiricalPositive,
        }
    }
}

/// Prompts averaged over by the regularizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegContextSource {
    EvalBatch,
    #[default]
    DatasetContexts,
}

impl RegContextSource {
    pub(crate) fn to_reg_contexts<T: Clone>(self, eval: &ContextBatch<T>) -> RegContexts<T> {
        match self {
            RegContextSource::EvalBatch => RegContexts::Batch(eval.clone()),
            RegContextSource::DatasetContexts => RegContexts::Dataset,
        }
    }
}

/// Environment and reference policy of one seeded run.
#[derive(Debug, Clone)]
pub struct RunSetup<T> {
    pub env: Arc<Environment<T>>,
    pub reference: Policy<T>,
}

/// Draws the environment from the `Environment` stream and `θ_ref ∼ U[0,1]`
/// from the `Reference` stream of `seed`.
pub fn build_run<T: Scalar>(spec: &EnvSpec, seed: u64) -> Result<RunSetup<T>> {
    let mut env_rng = SeededRng::for_stream(seed, Stream::Environment);
    let env = match spec.kind {
        EnvKind::Mab => make_mab_env(spec.arm_count, &mut env_rng)?,
        EnvKind::Contextual => {
            if spec.context_dim == 0 || spec.feature_dim == 0 {
                return Err(invalid("contextual environments need context_dim and feature_dim >= 1"));
            }
            make_contextual_env(spec.context_dim, spec.arm_count, spec.feature_dim, &mut env_rng)?
        }
    };
    let dim = match spec.kind {
        EnvKind::Mab => spec.arm_count,
        EnvKind::Contextual => spec.feature_dim,
    };
    let mut ref_rng = SeededRng::for_stream(seed, Stream::Reference);
    let theta_ref = (0..dim).map(|_| ref_rng.uniform::<T>()).collect();
    let reference = Policy::for_env(&env, theta_ref)?;
    Ok(RunSetup {
        env: Arc::new(env),
        reference,
    })
}

/// Frozen evaluation prompts: the single empty prompt for bandits, `n` draws
/// from the `Evaluation` stream otherwise.
pub(crate) fn eval_batch<T: Scalar>(env: &Environment<T>, n: usize, seed: u64) -> Result<ContextBatch<T>> {
    if env.is_contextual() {
        let mut rng = SeededRng::for_stream(seed, Stream::Evaluation);
        ContextBatch::for_env(env, n, &mut rng)
    } else {
        Ok(ContextBatch::singleton_empty())
    }
}
