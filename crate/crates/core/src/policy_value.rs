//! Softmax policies, reward models and the KL-regularized value functionals.
//!
//! For a reward `r` and reference `π_ref` the regularized optimum is the
//! exponential tilt `π_r ∝ π_ref · exp(r/β)` with normalizer `Z(r, x)`, and
//! its value is `J*(r) = β · E_x[log Z(r, x)]`. All sums over arms are exact;
//! expectations over prompts are averages over a [`ContextBatch`].

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::environments::{Environment, FeatureMap};
use crate::error::{invalid, Result, VpoError};
use crate::numerics::{
    dot, kl_divergence, log_softmax_unchecked, lse_unchecked, softmax_unchecked, ProbVec, Scalar,
    SeededRng,
};

/// Terms with `π(y|x)` below this contribute nothing to value sums.
pub const NEGLIGIBLE_PROB: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    /// `π(·|x) = softmax(θ)`, one logit per arm.
    TabularSoftmax,
    /// `π(·|x) = softmax(⟨θ, φ(x, ·)⟩)`.
    LogLinear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Policy<T> {
    kind: PolicyKind,
    theta: Vec<T>,
    feature_map: Option<Arc<FeatureMap<T>>>,
}

fn check_params<T: Scalar>(theta: &[T], what: &str) -> Result<()> {
    if let Some(index) = theta.iter().position(|t| !t.is_finite()) {
        return Err(VpoError::NonFinite {
            index,
            context: what.to_string(),
        });
    }
    Ok(())
}

impl<T: Scalar> Policy<T> {
    pub fn tabular(theta: Vec<T>) -> Result<Self> {
        if theta.is_empty() {
            return Err(invalid("tabular policy needs at least one arm"));
        }
        check_params(&theta, "policy theta")?;
        Ok(Self {
            kind: PolicyKind::TabularSoftmax,
            theta,
            feature_map: None,
        })
    }

    pub fn log_linear(theta: Vec<T>, feature_map: Arc<FeatureMap<T>>) -> Result<Self> {
        if theta.len() != feature_map.hidden_dim() {
            return Err(invalid(format!(
                "log-linear theta has length {}, feature width is {}",
                theta.len(),
                feature_map.hidden_dim()
            )));
        }
        check_params(&theta, "policy theta")?;
        Ok(Self {
            kind: PolicyKind::LogLinear,
            theta,
            feature_map: Some(feature_map),
        })
    }

    /// A policy of the natural class for `env`: tabular for the MAB,
    /// log-linear over the environment's features otherwise.
    pub fn for_env(env: &Environment<T>, theta: Vec<T>) -> Result<Self> {
        match env.feature_map() {
            None => Self::tabular(theta),
            Some(fm) => Self::log_linear(theta, Arc::clone(fm)),
        }
    }

    pub fn kind(&self) -> PolicyKind {
        self.kind
    }

    pub fn theta(&self) -> &[T] {
        &self.theta
    }

    pub fn feature_map(&self) -> Option<&Arc<FeatureMap<T>>> {
        self.feature_map.as_ref()
    }

    /// Same class and feature map, new parameters.
    pub fn with_theta(&self, theta: Vec<T>) -> Result<Self> {
        if theta.len() != self.theta.len() {
            return Err(invalid(format!(
                "parameter length {} differs from policy's {}",
                theta.len(),
                self.theta.len()
            )));
        }
        check_params(&theta, "policy theta")?;
        Ok(Self {
            kind: self.kind,
            theta,
            feature_map: self.feature_map.clone(),
        })
    }

    pub(crate) fn feature_map_required(&self) -> Result<&FeatureMap<T>> {
        self.feature_map
            .as_deref()
            .ok_or_else(|| VpoError::Config("log-linear policy has no feature map".into()))
    }

    pub fn arm_count(&self) -> Result<usize> {
        match self.kind {
            PolicyKind::TabularSoftmax => Ok(self.theta.len()),
            PolicyKind::LogLinear => Ok(self.feature_map_required()?.arm_count()),
        }
    }

    /// Per-arm logits at context `x`.
    pub fn logits(&self, x: &[T]) -> Result<Vec<T>> {
        match self.kind {
            PolicyKind::TabularSoftmax => Ok(self.theta.clone()),
            PolicyKind::LogLinear => {
                let fm = self.feature_map_required()?;
                let phi = fm.feature_matrix(x)?;
                Ok(phi.chunks(fm.hidden_dim()).map(|row| dot(row, &self.theta)).collect())
            }
        }
    }

    /// `π_θ(·|x)`.
    pub fn probs(&self, x: &[T]) -> Result<ProbVec<T>> {
        Ok(softmax_unchecked(&self.logits(x)?))
    }

    /// `log π_θ(·|x)`.
    pub fn log_probs(&self, x: &[T]) -> Result<Vec<T>> {
        Ok(log_softmax_unchecked(&self.logits(x)?))
    }

    pub fn snapshot(&self, feature_map_ref: Option<&str>) -> ModelSnapshot {
        ModelSnapshot {
            kind: match self.kind {
                PolicyKind::TabularSoftmax => "tabular-softmax".into(),
                PolicyKind::LogLinear => "log-linear".into(),
            },
            theta: self.theta.iter().map(|t| t.f64()).collect(),
            feature_map_ref: feature_map_ref.map(str::to_string),
        }
    }

    /// Rebuilds a policy; `feature_map` resolves `feature_map_ref`.
    pub fn from_snapshot(snap: &ModelSnapshot, feature_map: Option<Arc<FeatureMap<T>>>) -> Result<Self> {
        let theta = snap.theta.iter().map(|&t| T::of(t)).collect();
        match snap.kind.as_str() {
            "tabular-softmax" => Self::tabular(theta),
            "log-linear" => match feature_map {
                Some(fm) => Self::log_linear(theta, fm),
                None => Err(VpoError::Config(format!(
                    "log-linear snapshot references feature map {:?} which was not supplied",
                    snap.feature_map_ref
                ))),
            },
            other => Err(VpoError::Config(format!("unknown policy kind `{other}`"))),
        }
    }
}

/// `policy_probs`: the policy's conditional distribution at `x`.
pub fn policy_probs<T: Scalar>(policy: &Policy<T>, x: &[T]) -> Result<ProbVec<T>> {
    policy.probs(x)
}

/// Checkpoint form shared by policies and reward models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSnapshot {
    pub kind: String,
    pub theta: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_map_ref: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardKind {
    Tabular,
    Linear,
}

/// `r(x, y)`: a per-arm table, or `⟨φ(x, y), θ⟩`.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardModel<T> {
    kind: RewardKind,
    params: Vec<T>,
    feature_map: Option<Arc<FeatureMap<T>>>,
}

impl<T: Scalar> RewardModel<T> {
    pub fn tabular(table: Vec<T>) -> Self {
        Self {
            kind: RewardKind::Tabular,
            params: table,
            feature_map: None,
        }
    }

    pub fn linear(theta: Vec<T>, feature_map: Arc<FeatureMap<T>>) -> Result<Self> {
        if theta.len() != feature_map.hidden_dim() {
            return Err(invalid(format!(
                "linear reward has {} parameters, feature width is {}",
                theta.len(),
                feature_map.hidden_dim()
            )));
        }
        Ok(Self {
            kind: RewardKind::Linear,
            params: theta,
            feature_map: Some(feature_map),
        })
    }

    pub fn kind(&self) -> RewardKind {
        self.kind
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn feature_map(&self) -> Option<&Arc<FeatureMap<T>>> {
        self.feature_map.as_ref()
    }

    /// `r(x, ·)` over all arms.
    pub fn rewards(&self, x: &[T]) -> Result<Vec<T>> {
        match self.kind {
            RewardKind::Tabular => Ok(self.params.clone()),
            RewardKind::Linear => {
                let fm = self
                    .feature_map
                    .as_deref()
                    .ok_or_else(|| VpoError::Config("linear reward has no feature map".into()))?;
                let phi = fm.feature_matrix(x)?;
                Ok(phi.chunks(fm.hidden_dim()).map(|row| dot(row, &self.params)).collect())
            }
        }
    }

    pub fn reward(&self, x: &[T], y: usize) -> Result<T> {
        let all = self.rewards(x)?;
        all.get(y)
            .copied()
            .ok_or_else(|| invalid(format!("arm {y} out of range for {} arms", all.len())))
    }

    /// Adds `shift` to every arm of a tabular reward.
    pub fn shifted(&self, shift: T) -> Result<Self> {
        match self.kind {
            RewardKind::Tabular => Ok(Self::tabular(self.params.iter().map(|&r| r + shift).collect())),
            RewardKind::Linear => Err(invalid("constant shifts are only defined for tabular rewards")),
        }
    }

    pub fn snapshot(&self, feature_map_ref: Option<&str>) -> ModelSnapshot {
        ModelSnapshot {
            kind: match self.kind {
                RewardKind::Tabular => "tabular".into(),
                RewardKind::Linear => "linear".into(),
            },
            theta: self.params.iter().map(|t| t.f64()).collect(),
            feature_map_ref: feature_map_ref.map(str::to_string),
        }
    }
}

/// Prompts over which `E_{x∼ρ}` is averaged, uniformly weighted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ContextBatch<T> {
    contexts: Vec<Vec<T>>,
}

impl<T: Scalar> ContextBatch<T> {
    pub fn new(contexts: Vec<Vec<T>>) -> Result<Self> {
        if contexts.is_empty() {
            return Err(invalid("context batch must be non-empty"));
        }
        Ok(Self { contexts })
    }

    /// The single empty prompt of a multi-armed bandit.
    pub fn singleton_empty() -> Self {
        Self {
            contexts: vec![Vec::new()],
        }
    }

    /// Exact singleton for the MAB, otherwise `n` fresh prompts from `ρ`.
    pub fn for_env(env: &Environment<T>, n: usize, rng: &mut SeededRng) -> Result<Self> {
        if !env.is_contextual() {
            return Ok(Self::singleton_empty());
        }
        Self::new((0..n).map(|_| env.sample_context(rng)).collect())
    }

    pub fn contexts(&self) -> &[Vec<T>] {
        &self.contexts
    }

    pub fn len(&self) -> usize {
        self.contexts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contexts.is_empty()
    }

    fn mean_of<F>(&self, mut f: F) -> Result<T>
    where
        F: FnMut(&[T]) -> Result<T>,
    {
        let mut acc = T::zero();
        for x in &self.contexts {
            acc = acc + f(x)?;
        }
        Ok(acc / T::count(self.contexts.len()))
    }
}

/// Anything that yields a conditional distribution over arms.
pub trait ConditionalDist<T: Scalar> {
    fn dist(&self, x: &[T]) -> Result<ProbVec<T>>;

    fn log_dist(&self, x: &[T]) -> Result<Vec<T>> {
        Ok(self.dist(x)?.iter().map(|p| p.ln()).collect())
    }
}

impl<T: Scalar> ConditionalDist<T> for Policy<T> {
    fn dist(&self, x: &[T]) -> Result<ProbVec<T>> {
        self.probs(x)
    }

    fn log_dist(&self, x: &[T]) -> Result<Vec<T>> {
        self.log_probs(x)
    }
}

/// The same distribution at every prompt.
impl<T: Scalar> ConditionalDist<T> for ProbVec<T> {
    fn dist(&self, _x: &[T]) -> Result<ProbVec<T>> {
        Ok(self.clone())
    }
}

/// The closed-form optimum `π_r` viewed as a policy.
#[derive(Debug, Clone, Copy)]
pub struct TiltedPolicy<'a, T> {
    pub reward: &'a RewardModel<T>,
    pub reference: &'a Policy<T>,
    pub beta: T,
}

impl<T: Scalar> ConditionalDist<T> for TiltedPolicy<'_, T> {
    fn dist(&self, x: &[T]) -> Result<ProbVec<T>> {
        optimal_policy(self.reward, self.reference, self.beta, x)
    }

    fn log_dist(&self, x: &[T]) -> Result<Vec<T>> {
        Ok(log_softmax_unchecked(&tilted_logits(self.reward, self.reference, self.beta, x)?))
    }
}

fn check_beta<T: Scalar>(beta: T) -> Result<()> {
    if !(beta > T::zero()) || !beta.is_finite() {
        return Err(invalid(format!("beta must be > 0, got {beta}")));
    }
    Ok(())
}

/// `log π_ref(y|x) + r(x, y)/β` for every arm.
fn tilted_logits<T: Scalar>(r: &RewardModel<T>, pi_ref: &Policy<T>, beta: T, x: &[T]) -> Result<Vec<T>> {
    check_beta(beta)?;
    let log_ref = pi_ref.log_probs(x)?;
    let rewards = r.rewards(x)?;
    if rewards.len() != log_ref.len() {
        return Err(invalid(format!(
            "reward covers {} arms, reference policy {}",
            rewards.len(),
            log_ref.len()
        )));
    }
    Ok(log_ref.iter().zip(&rewards).map(|(&l, &rw)| l + rw / beta).collect())
}

/// `log Z(r, x)`.
pub fn log_partition<T: Scalar>(r: &RewardModel<T>, pi_ref: &Policy<T>, beta: T, x: &[T]) -> Result<T> {
    Ok(lse_unchecked(&tilted_logits(r, pi_ref, beta, x)?))
}

/// `Z(r, x) = Σ_y π_ref(y|x) exp(r(x, y)/β)`.
pub fn partition<T: Scalar>(r: &RewardModel<T>, pi_ref: &Policy<T>, beta: T, x: &[T]) -> Result<T> {
    Ok(log_partition(r, pi_ref, beta, x)?.exp())
}

/// `π_r(·|x) = π_ref(·|x) exp(r(x, ·)/β) / Z(r, x)`.
pub fn optimal_policy<T: Scalar>(
    r: &RewardModel<T>,
    pi_ref: &Policy<T>,
    beta: T,
    x: &[T],
) -> Result<ProbVec<T>> {
    Ok(softmax_unchecked(&tilted_logits(r, pi_ref, beta, x)?))
}

/// `β (log π(y|x) − log π_ref(y|x))`: the reward implied by `π`, up to the
/// prompt-wise shift `β log Z`.
pub fn implied_reward<T: Scalar>(
    pi: &impl ConditionalDist<T>,
    pi_ref: &Policy<T>,
    beta: T,
    x: &[T],
) -> Result<Vec<T>> {
    check_beta(beta)?;
    let lp = pi.log_dist(x)?;
    let lr = pi_ref.log_probs(x)?;
    Ok(lp.iter().zip(&lr).map(|(&a, &b)| beta * (a - b)).collect())
}

/// `J(r, π) = E_x Σ_y π(y|x)[r(x, y) − β(log π(y|x) − log π_ref(y|x))]`.
pub fn value_j<T: Scalar>(
    r: &RewardModel<T>,
    pi: &impl ConditionalDist<T>,
    pi_ref: &Policy<T>,
    beta: T,
    batch: &ContextBatch<T>,
) -> Result<T> {
    check_beta(beta)?;
    let floor = T::of(NEGLIGIBLE_PROB);
    batch.mean_of(|x| {
        let p = pi.dist(x)?;
        let lp = pi.log_dist(x)?;
        let lr = pi_ref.log_probs(x)?;
        let rw = r.rewards(x)?;
        if p.len() != rw.len() || lr.len() != rw.len() {
            return Err(invalid("policy, reference and reward disagree on the arm count"));
        }
        let mut acc = T::zero();
        for y in 0..rw.len() {
            if p[y] < floor {
                continue;
            }
            acc = acc + p[y] * (rw[y] - beta * (lp[y] - lr[y]));
        }
        Ok(acc)
    })
}

/// `J*(r) = β E_x[log Z(r, x)]`.
pub fn value_jstar<T: Scalar>(
    r: &RewardModel<T>,
    pi_ref: &Policy<T>,
    beta: T,
    batch: &ContextBatch<T>,
) -> Result<T> {
    check_beta(beta)?;
    Ok(beta * batch.mean_of(|x| log_partition(r, pi_ref, beta, x))?)
}

/// `E_x KL(π(·|x) ‖ π_ref(·|x))`.
pub fn kl_to_ref<T: Scalar>(
    pi: &impl ConditionalDist<T>,
    pi_ref: &impl ConditionalDist<T>,
    batch: &ContextBatch<T>,
) -> Result<T> {
    batch.mean_of(|x| kl_divergence(&pi.dist(x)?, &pi_ref.dist(x)?))
}

/// Result of projecting a reward onto the calibrated class.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibrated<T> {
    pub reward: RewardModel<T>,
    /// Mean removed, `E_{x, y∼π_cal}[r(x, y)]` before calibration.
    pub removed_mean: T,
    /// Linear model whose average calibrated feature vanished; returned unchanged.
    pub degenerate: bool,
}

/// `E_{x, y∼π_cal}[r(x, y)]` over the batch.
pub fn calibration_mean<T: Scalar>(
    r: &RewardModel<T>,
    pi_cal: &impl ConditionalDist<T>,
    batch: &ContextBatch<T>,
) -> Result<T> {
    batch.mean_of(|x| {
        let p = pi_cal.dist(x)?;
        let rw = r.rewards(x)?;
        if p.len() != rw.len() {
            return Err(invalid("calibration policy and reward disagree on the arm count"));
        }
        Ok(dot(&p, &rw))
    })
}

/// Projects `r` onto `{r : E_{x, y∼π_cal} r(x, y) = 0}`.
///
/// Tabular rewards subtract the mean from every entry. Linear rewards move
/// `θ` along the average calibrated feature `φ̄` so that `⟨φ̄, θ⟩ = 0`.
pub fn calibrate_reward<T: Scalar>(
    r: &RewardModel<T>,
    pi_cal: &impl ConditionalDist<T>,
    batch: &ContextBatch<T>,
) -> Result<Calibrated<T>> {
    let mean = calibration_mean(r, pi_cal, batch)?;
    match r.kind {
        RewardKind::Tabular => Ok(Calibrated {
            reward: r.shifted(-mean)?,
            removed_mean: mean,
            degenerate: false,
        }),
        RewardKind::Linear => {
            let fm = r
                .feature_map
                .as_deref()
                .ok_or_else(|| VpoError::Config("linear reward has no feature map".into()))?;
            let d = fm.hidden_dim();
            let mut phi_bar = vec![T::zero(); d];
            for x in batch.contexts() {
                let p = pi_cal.dist(x)?;
                let phi = fm.feature_matrix(x)?;
                for (row, &py) in phi.chunks(d).zip(p.iter()) {
                    for (acc, &f) in phi_bar.iter_mut().zip(row) {
                        *acc = *acc + py * f;
                    }
                }
            }
            let n = T::count(batch.len());
            phi_bar.iter_mut().for_each(|v| *v = *v / n);
            let norm_sq = dot(&phi_bar, &phi_bar);
            if norm_sq.sqrt() < T::of(1e-12) {
                return Ok(Calibrated {
                    reward: r.clone(),
                    removed_mean: mean,
                    degenerate: true,
                });
            }
            let m = dot(&phi_bar, &r.params);
            let params = r
                .params
                .iter()
                .zip(&phi_bar)
                .map(|(&t, &f)| t - m * f / norm_sq)
                .collect();
            Ok(Calibrated {
                reward: RewardModel {
                    kind: RewardKind::Linear,
                    params,
                    feature_map: r.feature_map.clone(),
                },
                removed_mean: mean,
                degenerate: false,
            })
        }
    }
}
