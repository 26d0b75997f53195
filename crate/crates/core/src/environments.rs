//! Synthetic bandit environments and the Bradley-Terry preference oracle.
//!
//! Two problems are provided: a multi-armed bandit with a single (empty)
//! prompt and i.i.d. `U[0, 1]` arm rewards, and a linear contextual bandit
//! whose reward is `⟨φ(x, y), θ*⟩` with `φ` the hidden layer of a frozen
//! tanh MLP fed `concat(x, one_hot(y))`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, VpoError};
use crate::numerics::{dot, sigmoid, Scalar, SeededRng};
use crate::policy_value::RewardModel;

/// Frozen single-hidden-layer tanh feature map.
///
/// Input is `concat(x, one_hot(y))`; the output is the hidden activation.
/// Weights are stored row-major, `hidden_dim × input_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    context_dim: usize,
    arm_count: usize,
    hidden_dim: usize,
    weights: Vec<T>,
    bias: Vec<T>,
}

impl<T: Scalar> FeatureMap<T> {
    /// Draws weights i.i.d. `N(0, σ²)` with `σ = 1/√input_dim` and zero bias.
    pub fn random(
        context_dim: usize,
        arm_count: usize,
        hidden_dim: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if arm_count == 0 || hidden_dim == 0 {
            return Err(invalid("feature map dimensions must be positive"));
        }
        let input_dim = context_dim + arm_count;
        let scale = T::one() / T::count(input_dim).sqrt();
        let weights = (0..hidden_dim * input_dim)
            .map(|_| rng.standard_normal::<T>() * scale)
            .collect();
        Ok(Self {
            context_dim,
            arm_count,
            hidden_dim,
            weights,
            bias: vec![T::zero(); hidden_dim],
        })
    }

    pub fn from_parts(
        context_dim: usize,
        arm_count: usize,
        weights: Vec<Vec<T>>,
        bias: Vec<T>,
    ) -> Result<Self> {
        let input_dim = context_dim + arm_count;
        let hidden_dim = weights.len();
        if hidden_dim == 0 || arm_count == 0 {
            return Err(invalid("feature map dimensions must be positive"));
        }
        if bias.len() != hidden_dim || weights.iter().any(|row| row.len() != input_dim) {
            return Err(invalid(format!(
                "feature map weights must be {hidden_dim} x {input_dim} with bias of length {hidden_dim}"
            )));
        }
        Ok(Self {
            context_dim,
            arm_count,
            hidden_dim,
            weights: weights.into_iter().flatten().collect(),
            bias,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.context_dim + self.arm_count
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn context_dim(&self) -> usize {
        self.context_dim
    }

    pub fn arm_count(&self) -> usize {
        self.arm_count
    }

    pub fn weight_rows(&self) -> Vec<Vec<T>> {
        self.weights.chunks(self.input_dim()).map(<[T]>::to_vec).collect()
    }

    pub fn bias(&self) -> &[T] {
        &self.bias
    }

    fn check(&self, x: &[T], y: usize) -> Result<()> {
        if x.len() != self.context_dim {
            return Err(invalid(format!(
                "context has length {}, feature map expects {}",
                x.len(),
                self.context_dim
            )));
        }
        if y >= self.arm_count {
            return Err(invalid(format!("arm {y} out of range for {} arms", self.arm_count)));
        }
        Ok(())
    }

    /// `φ(x, y)`; every entry lies in `(−1, 1)`.
    pub fn features(&self, x: &[T], y: usize) -> Result<Vec<T>> {
        self.check(x, y)?;
        Ok(self.features_unchecked(x, y))
    }

    pub(crate) fn features_unchecked(&self, x: &[T], y: usize) -> Vec<T> {
        let input_dim = self.input_dim();
        self.weights
            .chunks(input_dim)
            .zip(&self.bias)
            .map(|(row, &b)| {
                let pre = dot(&row[..self.context_dim], x) + row[self.context_dim + y] + b;
                pre.tanh()
            })
            .collect()
    }

    /// Features of every arm at `x`, flattened `arm_count × hidden_dim`.
    pub fn feature_matrix(&self, x: &[T]) -> Result<Vec<T>> {
        self.check(x, 0)?;
        let input_dim = self.input_dim();
        // The context part of the pre-activation is shared by all arms.
        let shared: Vec<T> = self
            .weights
            .chunks(input_dim)
            .zip(&self.bias)
            .map(|(row, &b)| dot(&row[..self.context_dim], x) + b)
            .collect();
        let mut out = Vec::with_capacity(self.arm_count * self.hidden_dim);
        for y in 0..self.arm_count {
            for (j, row) in self.weights.chunks(input_dim).enumerate() {
                out.push((shared[j] + row[self.context_dim + y]).tanh());
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MabEnv<T> {
    true_rewards: Vec<T>,
}

impl<T: Scalar> MabEnv<T> {
    pub fn from_rewards(true_rewards: Vec<T>) -> Result<Self> {
        if true_rewards.len() < 2 {
            return Err(invalid(format!(
                "a multi-armed bandit needs at least 2 arms, got {}",
                true_rewards.len()
            )));
        }
        if let Some(index) = true_rewards.iter().position(|r| !r.is_finite()) {
            return Err(VpoError::NonFinite {
                index,
                context: "MAB true reward".into(),
            });
        }
        Ok(Self { true_rewards })
    }

    pub fn true_rewards(&self) -> &[T] {
        &self.true_rewards
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContextualEnv<T> {
    feature_map: Arc<FeatureMap<T>>,
    theta_star: Vec<T>,
}

impl<T: Scalar> ContextualEnv<T> {
    pub fn from_parts(feature_map: Arc<FeatureMap<T>>, theta_star: Vec<T>) -> Result<Self> {
        if theta_star.len() != feature_map.hidden_dim() {
            return Err(invalid(format!(
                "theta_star has length {}, feature map width is {}",
                theta_star.len(),
                feature_map.hidden_dim()
            )));
        }
        if let Some(index) = theta_star.iter().position(|t| !t.is_finite()) {
            return Err(VpoError::NonFinite {
                index,
                context: "theta_star".into(),
            });
        }
        Ok(Self {
            feature_map,
            theta_star,
        })
    }

    pub fn feature_map(&self) -> &Arc<FeatureMap<T>> {
        &self.feature_map
    }

    pub fn theta_star(&self) -> &[T] {
        &self.theta_star
    }
}

/// Ground truth for one synthetic preference problem.
#[derive(Debug, Clone, PartialEq)]
pub enum Environment<T> {
    Mab(MabEnv<T>),
    Contextual(ContextualEnv<T>),
}

/// Multi-armed bandit with rewards i.i.d. `U[0, 1]`.
pub fn make_mab_env<T: Scalar>(arm_count: usize, rng: &mut SeededRng) -> Result<Environment<T>> {
    if arm_count < 2 {
        return Err(invalid(format!(
            "a multi-armed bandit needs at least 2 arms, got {arm_count}"
        )));
    }
    let rewards = (0..arm_count).map(|_| rng.uniform()).collect();
    Ok(Environment::Mab(MabEnv::from_rewards(rewards)?))
}

/// Linear contextual bandit: MLP features first, then `θ*` i.i.d. `U[0, 1]`.
pub fn make_contextual_env<T: Scalar>(
    context_dim: usize,
    arm_count: usize,
    hidden_dim: usize,
    rng: &mut SeededRng,
) -> Result<Environment<T>> {
    if context_dim == 0 || arm_count == 0 || hidden_dim == 0 {
        return Err(invalid(format!(
            "contextual bandit dimensions must be positive (context {context_dim}, arms {arm_count}, hidden {hidden_dim})"
        )));
    }
    let feature_map = FeatureMap::random(context_dim, arm_count, hidden_dim, rng)?;
    let theta_star = (0..hidden_dim).map(|_| rng.uniform()).collect();
    Ok(Environment::Contextual(ContextualEnv::from_parts(
        Arc::new(feature_map),
        theta_star,
    )?))
}

/// One labelled comparison `(x, y₊, y₋)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct PreferenceSample<T> {
    pub context: Vec<T>,
    pub preferred: usize,
    pub unpreferred: usize,
}

/// Ordered, append-only collection of comparisons.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct PreferenceDataset<T> {
    samples: Vec<PreferenceSample<T>>,
}

impl<T: Scalar> PreferenceDataset<T> {
    pub fn new() -> Self {
        Self { samples: Vec::new() }
    }

    pub fn from_samples(samples: Vec<PreferenceSample<T>>) -> Self {
        Self { samples }
    }

    pub fn push(&mut self, sample: PreferenceSample<T>) {
        self.samples.push(sample);
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[PreferenceSample<T>] {
        &self.samples
    }

    pub fn iter(&self) -> std::slice::Iter<'_, PreferenceSample<T>> {
        self.samples.iter()
    }

    /// The first `n` samples (all of them if `n` exceeds the length).
    pub fn prefix(&self, n: usize) -> Self {
        Self {
            samples: self.samples[..n.min(self.samples.len())].to_vec(),
        }
    }
}

impl<T: Scalar> Environment<T> {
    pub fn arm_count(&self) -> usize {
        match self {
            Environment::Mab(env) => env.true_rewards.len(),
            Environment::Contextual(env) => env.feature_map.arm_count(),
        }
    }

    /// Prompt dimension; 0 for the MAB whose only prompt is the empty context.
    pub fn context_dim(&self) -> usize {
        match self {
            Environment::Mab(_) => 0,
            Environment::Contextual(env) => env.feature_map.context_dim(),
        }
    }

    pub fn is_contextual(&self) -> bool {
        matches!(self, Environment::Contextual(_))
    }

    pub fn feature_map(&self) -> Option<&Arc<FeatureMap<T>>> {
        match self {
            Environment::Mab(_) => None,
            Environment::Contextual(env) => Some(&env.feature_map),
        }
    }

    /// Draws a prompt: i.i.d. `N(0, 1)` coordinates, or the empty context.
    pub fn sample_context(&self, rng: &mut SeededRng) -> Vec<T> {
        (0..self.context_dim()).map(|_| rng.standard_normal()).collect()
    }

    fn check_arm(&self, y: usize) -> Result<()> {
        if y >= self.arm_count() {
            return Err(invalid(format!(
                "arm {y} out of range for {} arms",
                self.arm_count()
            )));
        }
        Ok(())
    }

    fn check_context(&self, x: &[T]) -> Result<()> {
        if x.len() != self.context_dim() {
            return Err(invalid(format!(
                "context has length {}, environment expects {}",
                x.len(),
                self.context_dim()
            )));
        }
        Ok(())
    }

    /// `r*(x, y)`.
    pub fn true_reward(&self, x: &[T], y: usize) -> Result<T> {
        self.check_arm(y)?;
        self.check_context(x)?;
        Ok(match self {
            Environment::Mab(env) => env.true_rewards[y],
            Environment::Contextual(env) => {
                dot(&env.feature_map.features_unchecked(x, y), &env.theta_star)
            }
        })
    }

    /// The ground-truth reward as a [`RewardModel`].
    pub fn true_reward_model(&self) -> RewardModel<T> {
        match self {
            Environment::Mab(env) => RewardModel::tabular(env.true_rewards.clone()),
            Environment::Contextual(env) => {
                RewardModel::linear(env.theta_star.clone(), Arc::clone(&env.feature_map))
                    .expect("theta_star length matches the environment feature map")
            }
        }
    }

    /// `P(y₁ ≻ y₂ | x) = σ(r*(x, y₁) − r*(x, y₂))`.
    pub fn preference_prob(&self, x: &[T], y1: usize, y2: usize) -> Result<T> {
        let r1 = self.true_reward(x, y1)?;
        let r2 = self.true_reward(x, y2)?;
        if y1 == y2 {
            return Ok(T::of(0.5));
        }
        Ok(sigmoid(r1 - r2))
    }

    /// Queries the oracle once; consumes exactly one uniform from `rng`.
    pub fn label_pair(
        &self,
        x: &[T],
        y1: usize,
        y2: usize,
        rng: &mut SeededRng,
    ) -> Result<PreferenceSample<T>> {
        let p = self.preference_prob(x, y1, y2)?;
        let (preferred, unpreferred) = if rng.bernoulli(p) { (y1, y2) } else { (y2, y1) };
        Ok(PreferenceSample {
            context: x.to_vec(),
            preferred,
            unpreferred,
        })
    }

    pub fn snapshot(&self, seed: u64) -> EnvSnapshot {
        match self {
            Environment::Mab(env) => EnvSnapshot {
                kind: EnvKind::Mab,
                true_rewards: Some(env.true_rewards.iter().map(|r| r.f64()).collect()),
                theta_star: None,
                mlp_weights: None,
                mlp_bias: None,
                context_dim: 0,
                arm_count: env.true_rewards.len(),
                seed,
            },
            Environment::Contextual(env) => {
                let fm = &env.feature_map;
                EnvSnapshot {
                    kind: EnvKind::Contextual,
                    true_rewards: None,
                    theta_star: Some(env.theta_star.iter().map(|t| t.f64()).collect()),
                    mlp_weights: Some(
                        fm.weight_rows()
                            .into_iter()
                            .map(|row| row.into_iter().map(Scalar::f64).collect())
                            .collect(),
                    ),
                    mlp_bias: Some(fm.bias.iter().map(|b| b.f64()).collect()),
                    context_dim: fm.context_dim(),
                    arm_count: fm.arm_count(),
                    seed,
                }
            }
        }
    }

    pub fn from_snapshot(snapshot: &EnvSnapshot) -> Result<Self> {
        let lift = |v: &[f64]| v.iter().map(|&x| T::of(x)).collect::<Vec<T>>();
        let missing = |field: &str| VpoError::Config(format!("environment snapshot lacks `{field}`"));
        match snapshot.kind {
            EnvKind::Mab => {
                let rewards = snapshot.true_rewards.as_deref().ok_or_else(|| missing("true_rewards"))?;
                if rewards.len() != snapshot.arm_count {
                    return Err(VpoError::Config("true_rewards length differs from arm_count".into()));
                }
                Ok(Environment::Mab(MabEnv::from_rewards(lift(rewards))?))
            }
            EnvKind::Contextual => {
                let theta = snapshot.theta_star.as_deref().ok_or_else(|| missing("theta_star"))?;
                let weights = snapshot.mlp_weights.as_ref().ok_or_else(|| missing("mlp_weights"))?;
                let bias = snapshot.mlp_bias.as_deref().ok_or_else(|| missing("mlp_bias"))?;
                let fm = FeatureMap::from_parts(
                    snapshot.context_dim,
                    snapshot.arm_count,
                    weights.iter().map(|row| lift(row)).collect(),
                    lift(bias),
                )?;
                Ok(Environment::Contextual(ContextualEnv::from_parts(
                    Arc::new(fm),
                    lift(theta),
                )?))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    Mab,
    Contextual,
}

/// JSON replay document for an environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSnapshot {
    pub kind: EnvKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_rewards: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_star: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mlp_weights: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mlp_bias: Option<Vec<f64>>,
    pub context_dim: usize,
    pub arm_count: usize,
    pub seed: u64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Stream;

    fn two_arm(r0: f64, r1: f64) -> Environment<f64> {
        Environment::Mab(MabEnv::from_rewards(vec![r0, r1]).unwrap())
    }

    #[test]
    fn mab_rewards_in_unit_interval() {
        let mut rng = SeededRng::for_stream(0, Stream::Environment);
        let env: Environment<f64> = make_mab_env(10, &mut rng).unwrap();
        assert_eq!(env.arm_count(), 10);
        for y in 0..10 {
            let r = env.true_reward(&[], y).unwrap();
            assert!((0.0..=1.0).contains(&r));
        }
        assert!(make_mab_env::<f64>(2, &mut rng).is_ok());
        assert!(matches!(
            make_mab_env::<f64>(1, &mut rng),
            Err(VpoError::InvalidArgument(_))
        ));
    }

    #[test]
    fn mab_reward_mean_is_one_half() {
        let mut rng = SeededRng::for_stream(3, Stream::Environment);
        let env: Environment<f64> = make_mab_env(100_000, &mut rng).unwrap();
        let Environment::Mab(mab) = &env else { unreachable!() };
        let mean = mab.true_rewards().iter().sum::<f64>() / 1e5;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn contextual_env_shape_and_features() {
        let mut rng = SeededRng::for_stream(1, Stream::Environment);
        let env: Environment<f64> = make_contextual_env(2, 50, 10, &mut rng).unwrap();
        let Environment::Contextual(ctx) = &env else { unreachable!() };
        assert_eq!(ctx.theta_star().len(), 10);
        assert!(ctx.theta_star().iter().all(|t| (0.0..=1.0).contains(t)));
        assert_eq!(ctx.feature_map().input_dim(), 52);
        let mut crng = SeededRng::for_stream(1, Stream::Contexts);
        let x = env.sample_context(&mut crng);
        assert_eq!(x.len(), 2);
        let matrix = ctx.feature_map().feature_matrix(&x).unwrap();
        for y in 0..50 {
            let phi = ctx.feature_map().features(&x, y).unwrap();
            assert!(phi.iter().all(|v| v.abs() < 1.0));
            assert_eq!(&matrix[y * 10..(y + 1) * 10], phi.as_slice());
            // Independent dot product.
            let mut manual = 0.0;
            for j in 0..10 {
                manual += phi[j] * ctx.theta_star()[j];
            }
            assert!((env.true_reward(&x, y).unwrap() - manual).abs() < 1e-12);
        }
        assert!(make_contextual_env::<f64>(0, 5, 3, &mut rng).is_err());
    }

    #[test]
    fn context_sampling_statistics() {
        let mut rng = SeededRng::for_stream(5, Stream::Environment);
        let env: Environment<f64> = make_contextual_env(2, 5, 4, &mut rng).unwrap();
        let mut crng = SeededRng::for_stream(5, Stream::Contexts);
        let n = 100_000;
        let mut sums = [0.0; 2];
        for _ in 0..n {
            let x = env.sample_context(&mut crng);
            sums[0] += x[0];
            sums[1] += x[1];
        }
        for s in sums {
            assert!((s / n as f64).abs() < 0.02);
        }
        let mab = two_arm(0.1, 0.2);
        assert!(mab.sample_context(&mut crng).is_empty());
    }

    #[test]
    fn preference_probability_examples() {
        let env = two_arm(1.0, 0.0);
        assert_eq!(env.preference_prob(&[], 1, 1).unwrap(), 0.5);
        let p = env.preference_prob(&[], 0, 1).unwrap();
        assert!((p - 0.731_058_578_630_004_9).abs() < 1e-15);
        let q = env.preference_prob(&[], 1, 0).unwrap();
        assert!((p + q - 1.0).abs() < 1e-15);
        assert!(env.preference_prob(&[], 0, 2).is_err());
    }

    #[test]
    fn saturated_labels() {
        let env = two_arm(1000.0, 0.0);
        let mut rng = SeededRng::new(0, 0);
        for _ in 0..1000 {
            let s = env.label_pair(&[], 0, 1, &mut rng).unwrap();
            assert_eq!((s.preferred, s.unpreferred), (0, 1));
        }
    }

    #[test]
    fn label_frequency_matches_oracle() {
        let env = two_arm(0.8, 0.3);
        let p = env.preference_prob(&[], 0, 1).unwrap();
        let mut rng = SeededRng::new(11, Stream::Labels.id());
        let n = 100_000;
        let wins = (0..n)
            .filter(|_| env.label_pair(&[], 0, 1, &mut rng).unwrap().preferred == 0)
            .count();
        let freq = wins as f64 / n as f64;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!((freq - p).abs() < 4.0 * se);
        assert!((freq - p).abs() < 0.01);
    }

    #[test]
    fn self_comparison_is_accepted() {
        let env = two_arm(0.8, 0.3);
        let mut rng = SeededRng::new(2, 0);
        let before = rng.clone().next_u64();
        let s = env.label_pair(&[], 1, 1, &mut rng).unwrap();
        assert_eq!((s.preferred, s.unpreferred), (1, 1));
        // The coin is still flipped so stream consumption does not depend on the pair.
        assert_ne!(rng.clone().next_u64(), before);
    }

    #[test]
    fn oracle_is_shift_invariant() {
        let mut rng = SeededRng::new(4, 0);
        for _ in 0..100 {
            let rewards: Vec<f64> = (0..6).map(|_| rng.uniform()).collect();
            let c = 20.0 * rng.uniform::<f64>() - 10.0;
            let shifted: Vec<f64> = rewards.iter().map(|r| r + c).collect();
            let a = Environment::Mab(MabEnv::from_rewards(rewards).unwrap());
            let b = Environment::Mab(MabEnv::from_rewards(shifted).unwrap());
            for y1 in 0..6 {
                for y2 in 0..6 {
                    let d = a.preference_prob(&[], y1, y2).unwrap() - b.preference_prob(&[], y1, y2).unwrap();
                    assert!(d.abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn snapshot_round_trip() {
        let mut rng = SeededRng::for_stream(8, Stream::Environment);
        let env: Environment<f64> = make_contextual_env(2, 7, 3, &mut rng).unwrap();
        let json = serde_json::to_string(&env.snapshot(8)).unwrap();
        assert!(json.contains("\"mlp_weights\"") && json.contains("\"kind\":\"contextual\""));
        let snap: EnvSnapshot = serde_json::from_str(&json).unwrap();
        assert_eq!(Environment::<f64>::from_snapshot(&snap).unwrap(), env);

        let mab: Environment<f64> = make_mab_env(4, &mut rng).unwrap();
        let snap: EnvSnapshot = serde_json::from_str(&serde_json::to_string(&mab.snapshot(1)).unwrap()).unwrap();
        assert_eq!(Environment::<f64>::from_snapshot(&snap).unwrap(), mab);
    }
}
