//! Token-level deterministic MDP on a complete `A`-ary tree.
//!
//! A state is a prompt plus the tokens generated so far; appending a token
//! is the only transition. Generation stops after `H` tokens. When an EOS
//! token is configured, every state whose prefix already contains it is
//! absorbed: its reward is zero and its reference policy is a point mass on
//! EOS, so later steps add nothing to returns or log-ratios.
//!
//! The soft optimal solution for KL weight `β` satisfies
//!
//! ```text
//! Q(s, a) = r(s, a) + β log π_ref(a|s) + V(s·a),    V(s_H) = 0
//! V(s)    = β log Σ_a exp(Q(s, a)/β)
//! π_r(a|s) = exp((Q(s, a) − V(s))/β)
//! ```
//!
//! and every trajectory obeys `Σ_i r(s_i, a_i) = V(s₀) + β Σ_i log(π_r/π_ref)(a_i|s_i)`.
//! Prompts are equally likely.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, VpoError};
use crate::losses::{combine, nll_term, pair_margin, VpoConfig};
use crate::numerics::{log_softmax_unchecked, lse_unchecked, sigmoid, softmax_unchecked, ProbVec, Scalar, SeededRng};

/// Upper bound on `prompts × states × A` for any tree this module builds.
pub const MAX_TREE_ENTRIES: usize = 1 << 22;
/// Upper bound on `A^H` for trajectory enumeration.
pub const MAX_TRAJECTORIES: usize = 100_000;

/// Shape shared by an MDP and the token policies defined on it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeShape {
    pub vocab_size: usize,
    pub horizon: usize,
    pub prompts: usize,
}

impl TreeShape {
    pub fn new(vocab_size: usize, horizon: usize, prompts: usize) -> Result<Self> {
        if vocab_size < 2 || horizon == 0 || prompts == 0 {
            return Err(invalid(format!(
                "token tree needs vocab_size >= 2, horizon >= 1, prompts >= 1 (got {vocab_size}, {horizon}, {prompts})"
            )));
        }
        let too_big = || {
            VpoError::Resource(format!(
                "token tree with A = {vocab_size}, H = {horizon}, {prompts} prompts exceeds {MAX_TREE_ENTRIES} entries"
            ))
        };
        let mut nodes: usize = 0;
        let mut level: usize = 1;
        for _ in 0..horizon {
            nodes = nodes.checked_add(level).ok_or_else(too_big)?;
            level = level.checked_mul(vocab_size).ok_or_else(too_big)?;
        }
        let entries = nodes
            .checked_mul(vocab_size)
            .and_then(|e| e.checked_mul(prompts))
            .ok_or_else(too_big)?;
        if entries > MAX_TREE_ENTRIES {
            return Err(too_big());
        }
        Ok(Self {
            vocab_size,
            horizon,
            prompts,
        })
    }

    /// Non-terminal states per prompt, `Σ_{ℓ<H} A^ℓ`.
    pub fn nodes_per_prompt(&self) -> usize {
        level_offset(self.vocab_size, self.horizon)
    }

    pub fn state_count(&self) -> usize {
        self.prompts * self.nodes_per_prompt()
    }

    /// State index of `prefix` (length `< H`) under `prompt`.
    pub fn state(&self, prompt: usize, prefix: &[usize]) -> Result<usize> {
        if prompt >= self.prompts {
            return Err(invalid(format!("prompt {prompt} out of range for {} prompts", self.prompts)));
        }
        if prefix.len() >= self.horizon {
            return Err(invalid(format!(
                "prefix of length {} has no successor at horizon {}",
                prefix.len(),
                self.horizon
            )));
        }
        let mut code = 0;
        for &a in prefix {
            if a >= self.vocab_size {
                return Err(invalid(format!("token {a} out of range for vocabulary of {}", self.vocab_size)));
            }
            code = code * self.vocab_size + a;
        }
        Ok(prompt * self.nodes_per_prompt() + level_offset(self.vocab_size, prefix.len()) + code)
    }

    /// Child of non-terminal `state` under `action`, or `None` at the horizon.
    fn child(&self, state: usize, depth: usize, action: usize) -> Option<usize> {
        if depth + 1 >= self.horizon {
            return None;
        }
        let n = self.nodes_per_prompt();
        let (prompt, node) = (state / n, state % n);
        let code = node - level_offset(self.vocab_size, depth);
        Some(prompt * n + level_offset(self.vocab_size, depth + 1) + code * self.vocab_size + action)
    }

    /// Depth of every state within its prompt's tree.
    fn depths(&self) -> Vec<usize> {
        let mut per_prompt = Vec::with_capacity(self.nodes_per_prompt());
        let mut width = 1;
        for depth in 0..self.horizon {
            per_prompt.extend(std::iter::repeat_n(depth, width));
            width *= self.vocab_size;
        }
        per_prompt.iter().cycle().take(self.state_count()).copied().collect()
    }

    fn check_trajectory(&self, t: &Trajectory) -> Result<()> {
        if t.prompt >= self.prompts {
            return Err(invalid(format!("prompt {} out of range", t.prompt)));
        }
        if t.actions.len() != self.horizon || t.actions.iter().any(|&a| a >= self.vocab_size) {
            return Err(invalid(format!(
                "trajectory must have {} tokens below {}",
                self.horizon, self.vocab_size
            )));
        }
        Ok(())
    }

    /// States visited by `t`, one per step.
    fn path(&self, t: &Trajectory) -> Vec<usize> {
        let mut states = Vec::with_capacity(self.horizon);
        let mut s = t.prompt * self.nodes_per_prompt();
        for (depth, &a) in t.actions.iter().enumerate() {
            states.push(s);
            if let Some(c) = self.child(s, depth, a) {
                s = c;
            }
        }
        states
    }
}

fn level_offset(a: usize, depth: usize) -> usize {
    let mut offset = 0;
    let mut width = 1;
    for _ in 0..depth {
        offset += width;
        width *= a;
    }
    offset
}

/// Tabular softmax policy with one logit vector per state.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenPolicy<T> {
    shape: TreeShape,
    /// `[state * A + a]`; `-inf` marks an impossible token.
    logits: Vec<T>,
}

impl<T: Scalar> TokenPolicy<T> {
    pub fn from_logits(shape: TreeShape, logits: Vec<T>) -> Result<Self> {
        let a = shape.vocab_size;
        if logits.len() != shape.state_count() * a {
            return Err(invalid(format!(
                "expected {} logits, got {}",
                shape.state_count() * a,
                logits.len()
            )));
        }
        for (s, block) in logits.chunks_exact(a).enumerate() {
            if block.iter().any(|l| l.is_nan() || *l == T::infinity()) || block.iter().all(|l| !l.is_finite()) {
                return Err(VpoError::NonFinite {
                    index: s,
                    context: "token policy logits (need one finite entry per state)".into(),
                });
            }
        }
        Ok(Self { shape, logits })
    }

    /// Policy with the given per-state distributions; zero entries become
    /// impossible tokens.
    pub fn from_probs(shape: TreeShape, probs: &[T]) -> Result<Self> {
        let a = shape.vocab_size;
        if probs.len() != shape.state_count() * a {
            return Err(invalid(format!("expected {} probabilities, got {}", shape.state_count() * a, probs.len())));
        }
        for block in probs.chunks_exact(a) {
            ProbVec::new(block.to_vec())?;
        }
        let logits = probs
            .iter()
            .map(|&p| if p > T::zero() { p.ln() } else { T::neg_infinity() })
            .collect();
        Self::from_logits(shape, logits)
    }

    pub fn uniform(shape: TreeShape) -> Self {
        Self {
            shape,
            logits: vec![T::zero(); shape.state_count() * shape.vocab_size],
        }
    }

    pub fn shape(&self) -> TreeShape {
        self.shape
    }

    pub fn logits(&self, state: usize) -> &[T] {
        let a = self.shape.vocab_size;
        &self.logits[state * a..(state + 1) * a]
    }

    pub fn log_probs(&self, state: usize) -> Vec<T> {
        log_softmax_unchecked(self.logits(state))
    }

    pub fn probs(&self, state: usize) -> ProbVec<T> {
        softmax_unchecked(self.logits(state))
    }

    /// `Σ_i log π(a_i|s_i)` along `t`.
    pub fn trajectory_log_prob(&self, t: &Trajectory) -> Result<T> {
        self.shape.check_trajectory(t)?;
        Ok(self
            .shape
            .path(t)
            .iter()
            .zip(&t.actions)
            .fold(T::zero(), |acc, (&s, &a)| acc + self.log_probs(s)[a]))
    }

    /// Draws one trajectory for `prompt`, one uniform per step.
    pub fn sample(&self, prompt: usize, rng: &mut SeededRng) -> Result<Trajectory> {
        let mut s = self.shape.state(prompt, &[])?;
        let mut actions = Vec::with_capacity(self.shape.horizon);
        for depth in 0..self.shape.horizon {
            let a = rng.categorical(&self.probs(s));
            actions.push(a);
            if let Some(c) = self.shape.child(s, depth, a) {
                s = c;
            }
        }
        Ok(Trajectory { prompt, actions })
    }
}

/// A prompt and its `H` generated tokens.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Trajectory {
    pub prompt: usize,
    pub actions: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPair {
    pub preferred: Trajectory,
    pub unpreferred: Trajectory,
}

/// Serialized form of [`TokenMdp`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TokenMdpFile {
    vocab_size: usize,
    horizon: usize,
    prompts: usize,
    eos: Option<usize>,
    rewards: Vec<f64>,
    reference: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenMdp<T> {
    shape: TreeShape,
    eos: Option<usize>,
    /// `[state * A + a]`.
    rewards: Vec<T>,
    reference: TokenPolicy<T>,
    reference_probs: Vec<T>,
    absorbed: Vec<bool>,
}

impl<T: Scalar> TokenMdp<T> {
    /// Builds an MDP from per-state rewards and reference distributions
    /// (`[state * A + a]`). Entries at absorbed states are replaced by the
    /// EOS convention.
    pub fn new(shape: TreeShape, eos: Option<usize>, mut rewards: Vec<T>, mut reference: Vec<T>) -> Result<Self> {
        let a = shape.vocab_size;
        let n = shape.state_count() * a;
        if rewards.len() != n || reference.len() != n {
            return Err(invalid(format!("rewards and reference need {n} entries each")));
        }
        if let Some(index) = rewards.iter().position(|r| !r.is_finite()) {
            return Err(VpoError::NonFinite {
                index,
                context: "token rewards".into(),
            });
        }
        if let Some(e) = eos {
            if e >= a {
                return Err(invalid(format!("eos token {e} out of range")));
            }
        }
        let absorbed = absorbed_states(&shape, eos);
        if let Some(e) = eos {
            for (s, _) in absorbed.iter().enumerate().filter(|(_, &x)| x) {
                for t in 0..a {
                    rewards[s * a + t] = T::zero();
                    reference[s * a + t] = if t == e { T::one() } else { T::zero() };
                }
            }
        }
        let policy = TokenPolicy::from_probs(shape, &reference)?;
        Ok(Self {
            shape,
            eos,
            rewards,
            reference: policy,
            reference_probs: reference,
            absorbed,
        })
    }

    /// Rewards uniform in `[−1, 1]`, reference logits standard normal.
    pub fn random(shape: TreeShape, eos: Option<usize>, rng: &mut SeededRng) -> Result<Self> {
        let n = shape.state_count() * shape.vocab_size;
        let rewards = (0..n).map(|_| T::of(2.0) * rng.uniform::<T>() - T::one()).collect();
        let logits: Vec<T> = (0..n).map(|_| rng.standard_normal::<T>()).collect();
        let reference = logits
            .chunks_exact(shape.vocab_size)
            .flat_map(|block| softmax_unchecked(block).into_vec())
            .collect();
        Self::new(shape, eos, rewards, reference)
    }

    pub fn shape(&self) -> TreeShape {
        self.shape
    }

    pub fn eos(&self) -> Option<usize> {
        self.eos
    }

    pub fn reference(&self) -> &TokenPolicy<T> {
        &self.reference
    }

    pub fn is_absorbed(&self, state: usize) -> bool {
        self.absorbed[state]
    }

    pub fn reward(&self, state: usize, action: usize) -> T {
        self.rewards[state * self.shape.vocab_size + action]
    }

    /// Same tree with every reward replaced by `f(state, action, reward)`.
    pub fn map_rewards(&self, mut f: impl FnMut(usize, usize, T) -> T) -> Result<Self> {
        let a = self.shape.vocab_size;
        let rewards = self
            .rewards
            .iter()
            .enumerate()
            .map(|(i, &r)| f(i / a, i % a, r))
            .collect();
        Self::new(self.shape, self.eos, rewards, self.reference_probs.clone())
    }

    /// `Σ_i r(s_i, a_i)` along `t`.
    pub fn trajectory_return(&self, t: &Trajectory) -> Result<T> {
        self.shape.check_trajectory(t)?;
        Ok(self
            .shape
            .path(t)
            .iter()
            .zip(&t.actions)
            .fold(T::zero(), |acc, (&s, &a)| acc + self.reward(s, a)))
    }

    /// Every trajectory of `prompt` with positive reference probability.
    pub fn trajectories(&self, prompt: usize) -> Result<Vec<Trajectory>> {
        let count = trajectory_count(&self.shape)?;
        let mut out = Vec::new();
        let mut actions = vec![0; self.shape.horizon];
        for _ in 0..count {
            let t = Trajectory {
                prompt,
                actions: actions.clone(),
            };
            if self.reference.trajectory_log_prob(&t)? > T::neg_infinity() {
                out.push(t);
            }
            advance(&mut actions, self.shape.vocab_size);
        }
        Ok(out)
    }

    /// Pairs with `x` uniform over prompts, `τ₁, τ₂ ∼ π`, and Bradley–Terry
    /// labels on trajectory returns.
    pub fn sample_pairs(&self, policy: &TokenPolicy<T>, n: usize, rng: &mut SeededRng) -> Result<Vec<TrajectoryPair>> {
        if policy.shape() != self.shape {
            return Err(invalid("policy shape differs from the MDP"));
        }
        (0..n)
            .map(|_| {
                let prompt = (rng.next_u64() % self.shape.prompts as u64) as usize;
                let t1 = policy.sample(prompt, rng)?;
                let t2 = policy.sample(prompt, rng)?;
                let p = sigmoid(self.trajectory_return(&t1)? - self.trajectory_return(&t2)?);
                Ok(if rng.bernoulli(p) {
                    TrajectoryPair {
                        preferred: t1,
                        unpreferred: t2,
                    }
                } else {
                    TrajectoryPair {
                        preferred: t2,
                        unpreferred: t1,
                    }
                })
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let file = TokenMdpFile {
            vocab_size: self.shape.vocab_size,
            horizon: self.shape.horizon,
            prompts: self.shape.prompts,
            eos: self.eos,
            rewards: self.rewards.iter().map(|r| r.f64()).collect(),
            reference: self.reference_probs.iter().map(|p| p.f64()).collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: TokenMdpFile = serde_json::from_str(text)?;
        let shape = TreeShape::new(file.vocab_size, file.horizon, file.prompts)?;
        Self::new(
            shape,
            file.eos,
            file.rewards.into_iter().map(T::of).collect(),
            file.reference.into_iter().map(T::of).collect(),
        )
    }
}

fn absorbed_states(shape: &TreeShape, eos: Option<usize>) -> Vec<bool> {
    let mut absorbed = vec![false; shape.state_count()];
    let Some(e) = eos else { return absorbed };
    let depths = shape.depths();
    for s in 0..shape.state_count() {
        for a in 0..shape.vocab_size {
            if let Some(c) = shape.child(s, depths[s], a) {
                absorbed[c] = absorbed[s] || a == e;
            }
        }
    }
    absorbed
}

fn trajectory_count(shape: &TreeShape) -> Result<usize> {
    let mut count: usize = 1;
    for _ in 0..shape.horizon {
        count = count
            .checked_mul(shape.vocab_size)
            .filter(|&c| c <= MAX_TRAJECTORIES)
            .ok_or_else(|| {
                VpoError::Resource(format!(
                    "A^H = {}^{} trajectories exceeds the enumeration bound {MAX_TRAJECTORIES}",
                    shape.vocab_size, shape.horizon
                ))
            })?;
    }
    Ok(count)
}

/// Odometer increment over `A^H` action sequences.
fn advance(actions: &mut [usize], a: usize) {
    for slot in actions.iter_mut().rev() {
        *slot += 1;
        if *slot < a {
            return;
        }
        *slot = 0;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftSolution<T> {
    pub beta: T,
    /// `V(s)` per non-terminal state.
    pub v: Vec<T>,
    /// `Q(s, a)` at `[state * A + a]`.
    pub q: Vec<T>,
    pub policy: TokenPolicy<T>,
}

impl<T: Scalar> SoftSolution<T> {
    pub fn root_value(&self, prompt: usize) -> T {
        self.v[prompt * self.policy.shape().nodes_per_prompt()]
    }

    /// Trajectory taking the most likely token at every step.
    pub fn greedy_trajectory(&self, prompt: usize) -> Result<Trajectory> {
        let shape = self.policy.shape();
        let mut s = shape.state(prompt, &[])?;
        let mut actions = Vec::with_capacity(shape.horizon);
        for depth in 0..shape.horizon {
            let p = self.policy.probs(s);
            let a = (0..p.len())
                .max_by(|&i, &j| p[i].partial_cmp(&p[j]).expect("finite"))
                .expect("nonempty vocabulary");
            actions.push(a);
            if let Some(c) = shape.child(s, depth, a) {
                s = c;
            }
        }
        Ok(Trajectory { prompt, actions })
    }
}

fn check_beta<T: Scalar>(beta: T) -> Result<()> {
    if beta > T::zero() && beta.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!("beta must be > 0, got {beta}")))
    }
}

/// Soft value iteration from the leaves up.
pub fn soft_backward_induction<T: Scalar>(mdp: &TokenMdp<T>, beta: T) -> Result<SoftSolution<T>> {
    check_beta(beta)?;
    let shape = mdp.shape;
    let a = shape.vocab_size;
    let depths = shape.depths();
    let mut v = vec![T::zero(); shape.state_count()];
    let mut q = vec![T::zero(); shape.state_count() * a];
    let mut logits = vec![T::zero(); shape.state_count() * a];
    // Children always have larger indices than their parents.
    for s in (0..shape.state_count()).rev() {
        let log_ref = mdp.reference.log_probs(s);
        for t in 0..a {
            let next = shape.child(s, depths[s], t).map_or(T::zero(), |c| v[c]);
            q[s * a + t] = if log_ref[t] == T::neg_infinity() {
                T::neg_infinity()
            } else {
                mdp.reward(s, t) + beta * log_ref[t] + next
            };
        }
        let scaled: Vec<T> = q[s * a..(s + 1) * a].iter().map(|&x| x / beta).collect();
        v[s] = beta * lse_unchecked(&scaled);
        for t in 0..a {
            logits[s * a + t] = (q[s * a + t] - v[s]) / beta;
        }
    }
    Ok(SoftSolution {
        beta,
        v,
        q,
        policy: TokenPolicy::from_logits(shape, logits)?,
    })
}

/// `β log Σ_τ [Π_i π_ref(a_i|s_i)] exp(Σ_i r(s_i, a_i)/β)` over all `A^H`
/// trajectories of `prompt`.
pub fn trajectory_logsumexp_oracle<T: Scalar>(mdp: &TokenMdp<T>, prompt: usize, beta: T) -> Result<T> {
    check_beta(beta)?;
    if prompt >= mdp.shape.prompts {
        return Err(invalid(format!("prompt {prompt} out of range")));
    }
    let count = trajectory_count(&mdp.shape)?;
    let mut terms = Vec::with_capacity(count);
    let mut actions = vec![0; mdp.shape.horizon];
    for _ in 0..count {
        let t = Trajectory {
            prompt,
            actions: actions.clone(),
        };
        let log_ref = mdp.reference.trajectory_log_prob(&t)?;
        if log_ref > T::neg_infinity() {
            terms.push(log_ref + mdp.trajectory_return(&t)? / beta);
        }
        advance(&mut actions, mdp.shape.vocab_size);
    }
    Ok(beta * lse_unchecked(&terms))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TelescopingReport<T> {
    pub checked: usize,
    /// Trajectories with zero reference probability, for which the log-ratio
    /// is undefined.
    pub skipped: usize,
    pub max_residual: T,
}

/// `|Σ_i r(s_i, a_i) − V(s₀) − β Σ_i log(π_r/π_ref)(a_i|s_i)|` over `trajectories`.
pub fn telescoping_check<T: Scalar>(
    mdp: &TokenMdp<T>,
    solution: &SoftSolution<T>,
    trajectories: &[Trajectory],
) -> Result<TelescopingReport<T>> {
    if solution.policy.shape() != mdp.shape {
        return Err(invalid("solution shape differs from the MDP"));
    }
    let mut report = TelescopingReport {
        checked: 0,
        skipped: 0,
        max_residual: T::zero(),
    };
    for t in trajectories {
        let log_ref = mdp.reference.trajectory_log_prob(t)?;
        if log_ref == T::neg_infinity() {
            report.skipped += 1;
            continue;
        }
        let log_ratio = solution.policy.trajectory_log_prob(t)? - log_ref;
        let residual = (mdp.trajectory_return(t)? - solution.root_value(t.prompt) - solution.beta * log_ratio).abs();
        report.max_residual = report.max_residual.max(residual);
        report.checked += 1;
    }
    Ok(report)
}

/// `E_{s, a∼π}[f(s, a) + value of the successor]` from the root of every
/// prompt, by exact recursion; tokens with zero probability are skipped.
fn expected_sum<T: Scalar>(policy: &TokenPolicy<T>, mut f: impl FnMut(usize, usize) -> T) -> Vec<T> {
    let shape = policy.shape();
    let a = shape.vocab_size;
    let depths = shape.depths();
    let mut e = vec![T::zero(); shape.state_count()];
    for s in (0..shape.state_count()).rev() {
        let p = policy.probs(s);
        let mut acc = T::zero();
        for t in 0..a {
            if p[t] > T::zero() {
                let next = shape.child(s, depths[s], t).map_or(T::zero(), |c| e[c]);
                acc = acc + p[t] * (f(s, t) + next);
            }
        }
        e[s] = acc;
    }
    (0..shape.prompts).map(|p| e[p * shape.nodes_per_prompt()]).collect()
}

fn prompt_mean<T: Scalar>(values: &[T]) -> T {
    values.iter().fold(T::zero(), |acc, &v| acc + v) / T::count(values.len())
}

/// `E_{s₀, τ∼π}[Σ_i r(s_i, a_i)]`.
pub fn expected_return<T: Scalar>(mdp: &TokenMdp<T>, policy: &TokenPolicy<T>) -> Result<T> {
    if policy.shape() != mdp.shape {
        return Err(invalid("policy shape differs from the MDP"));
    }
    Ok(prompt_mean(&expected_sum(policy, |s, a| mdp.reward(s, a))))
}

/// Shifts every prompt's first-step rewards by one shared constant so that
/// `E_{s₀, τ∼π_cal}[Σ_i r] = 0`. Returns the shifted MDP and the removed mean.
pub fn calibrate_token_reward<T: Scalar>(mdp: &TokenMdp<T>, pi_cal: &TokenPolicy<T>) -> Result<(TokenMdp<T>, T)> {
    let mean = expected_return(mdp, pi_cal)?;
    let n = mdp.shape.nodes_per_prompt();
    let shifted = mdp.map_rewards(|s, _, r| if s % n == 0 { r - mean } else { r })?;
    Ok((shifted, mean))
}

/// `−β E_{s₀, τ∼π_cal}[Σ_i log(π_r/π_ref)(a_i|s_i)]`, which equals
/// `E_{s₀}[V(s₀)]` when the rewards are calibrated under `π_cal`.
pub fn token_jstar<T: Scalar>(mdp: &TokenMdp<T>, beta: T, pi_cal: &TokenPolicy<T>) -> Result<T> {
    if pi_cal.shape() != mdp.shape {
        return Err(invalid("calibration policy shape differs from the MDP"));
    }
    let solution = soft_backward_induction(mdp, beta)?;
    let log_ratio = |s: usize, a: usize| solution.policy.log_probs(s)[a] - mdp.reference.log_probs(s)[a];
    Ok(-beta * prompt_mean(&expected_sum(pi_cal, log_ratio)))
}

/// Token-level VPO loss:
///
/// ```text
/// −Σ log σ(β Σ_i log(π/π_ref) on τ₊ − β Σ_i log(π/π_ref) on τ₋)
///   + sign · α · β · E_{s₀, τ∼π_cal}[Σ_i log(π/π_ref)]
/// ```
///
/// With `H = 1` and one prompt this is the bandit `vpo_loss` value.
pub fn token_vpo_loss<T: Scalar>(
    pi: &TokenPolicy<T>,
    pi_ref: &TokenPolicy<T>,
    pi_cal: &TokenPolicy<T>,
    cfg: &VpoConfig<T>,
    data: &[TrajectoryPair],
) -> Result<T> {
    cfg.validate()?;
    let shape = pi.shape();
    if pi_ref.shape() != shape || pi_cal.shape() != shape {
        return Err(invalid("token policies must share one tree shape"));
    }
    let log_ratio = |t: &Trajectory| -> Result<T> {
        shape.check_trajectory(t)?;
        Ok(shape
            .path(t)
            .iter()
            .zip(&t.actions)
            .fold(T::zero(), |acc, (&s, &a)| acc + (pi.log_probs(s)[a] - pi_ref.log_probs(s)[a])))
    };
    let mut nll = T::zero();
    for pair in data {
        if pair.preferred.prompt != pair.unpreferred.prompt {
            return Err(invalid(format!(
                "pair compares prompts {} and {}",
                pair.preferred.prompt, pair.unpreferred.prompt
            )));
        }
        let m = pair_margin(cfg.beta, log_ratio(&pair.preferred)?, log_ratio(&pair.unpreferred)?);
        nll = nll + nll_term(m);
    }
    let reg = prompt_mean(&expected_sum(pi_cal, |s, a| pi.log_probs(s)[a] - pi_ref.log_probs(s)[a]));
    Ok(combine(nll, reg, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environments::{PreferenceDataset, PreferenceSample};
    use crate::losses::{vpo_loss, Calibration, Sign};
    use crate::policy_value::{log_partition, ContextBatch, Policy, RewardModel};

    fn shape(a: usize, h: usize, p: usize) -> TreeShape {
        TreeShape::new(a, h, p).unwrap()
    }

    #[test]
    fn shape_indexing() {
        let s = shape(3, 3, 2);
        assert_eq!(s.nodes_per_prompt(), 1 + 3 + 9);
        assert_eq!(s.state(0, &[]).unwrap(), 0);
        assert_eq!(s.state(0, &[2]).unwrap(), 3);
        assert_eq!(s.state(1, &[1, 2]).unwrap(), 13 + 4 + 5);
        assert!(s.state(0, &[0, 0, 0]).is_err());
        assert!(s.state(2, &[]).is_err());
        assert_eq!(s.child(s.state(0, &[1]).unwrap(), 1, 2), Some(s.state(0, &[1, 2]).unwrap()));
        assert_eq!(s.child(s.state(0, &[1, 2]).unwrap(), 2, 0), None);
        assert!(TreeShape::new(1, 3, 1).is_err());
        assert!(matches!(TreeShape::new(5, 40, 1), Err(VpoError::Resource(_))));
        assert!(matches!(TreeShape::new(64, 5, 1), Err(VpoError::Resource(_))));
    }

    #[test]
    fn one_step_reduces_to_bandit_closed_form() {
        let mut rng = SeededRng::new(0, 6);
        let mdp = TokenMdp::<f64>::random(shape(4, 1, 1), None, &mut rng).unwrap();
        let sol = soft_backward_induction(&mdp, 0.7).unwrap();
        let r = RewardModel::tabular((0..4).map(|a| mdp.reward(0, a)).collect());
        let reference = Policy::tabular(mdp.reference().logits(0).to_vec()).unwrap();
        let log_z = log_partition(&r, &reference, 0.7, &[]).unwrap();
        assert!((sol.root_value(0) - 0.7 * log_z).abs() < 1e-12);
    }

    #[test]
    fn zero_reward_keeps_reference() {
        let mut rng = SeededRng::new(1, 6);
        let mdp = TokenMdp::<f64>::random(shape(3, 3, 2), Some(2), &mut rng).unwrap();
        let flat = mdp.map_rewards(|_, _, _| 0.0).unwrap();
        let sol = soft_backward_induction(&flat, 1.3).unwrap();
        for s in 0..flat.shape().state_count() {
            let p = sol.policy.probs(s);
            let q = flat.reference().probs(s);
            for (x, y) in p.iter().zip(q.iter()) {
                assert!((x - y).abs() < 1e-12);
            }
            assert!(sol.v[s].abs() < 1e-12);
        }
        assert!(trajectory_logsumexp_oracle(&flat, 1, 1.3).unwrap().abs() < 1e-12);
    }

    #[test]
    fn constant_reward_oracle() {
        let mut rng = SeededRng::new(2, 6);
        let mdp = TokenMdp::<f64>::random(shape(2, 4, 1), None, &mut rng).unwrap();
        let c = mdp.map_rewards(|_, _, _| 0.4).unwrap();
        assert!((trajectory_logsumexp_oracle(&c, 0, 2.0).unwrap() - 1.6).abs() < 1e-12);
    }

    #[test]
    fn induction_matches_oracle_and_telescopes() {
        let mut rng = SeededRng::new(3, 6);
        for i in 0..20 {
            let a = 2 + i % 2;
            let h = 1 + i % 4;
            let eos = if i % 3 == 0 { Some(0) } else { None };
            let mdp = TokenMdp::<f64>::random(shape(a, h, 2), eos, &mut rng).unwrap();
            let beta = 0.3 + rng.uniform::<f64>() * 3.0;
            let sol = soft_backward_induction(&mdp, beta).unwrap();
            for p in 0..2 {
                let oracle = trajectory_logsumexp_oracle(&mdp, p, beta).unwrap();
                assert!((sol.root_value(p) - oracle).abs() < 1e-10);
                let all = mdp.trajectories(p).unwrap();
                let rep = telescoping_check(&mdp, &sol, &all).unwrap();
                assert_eq!(rep.checked, all.len());
                assert!(rep.max_residual < 1e-10);
                let greedy = sol.greedy_trajectory(p).unwrap();
                assert!(telescoping_check(&mdp, &sol, &[greedy]).unwrap().max_residual < 1e-10);
            }
            for s in 0..mdp.shape().state_count() {
                let total: f64 = sol.policy.probs(s).iter().sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn eos_absorbs() {
        let mut rng = SeededRng::new(4, 6);
        let s = shape(3, 3, 1);
        let mdp = TokenMdp::<f64>::random(s, Some(1), &mut rng).unwrap();
        let after = s.state(0, &[1]).unwrap();
        assert!(mdp.is_absorbed(after));
        assert!(mdp.is_absorbed(s.state(0, &[1, 0]).unwrap()));
        assert!(!mdp.is_absorbed(s.state(0, &[0, 2]).unwrap()));
        assert_eq!(mdp.reward(after, 1), 0.0);
        assert_eq!(mdp.reference().probs(after)[1], 1.0);

        let stop = Trajectory {
            prompt: 0,
            actions: vec![0, 1, 1],
        };
        let first_two = mdp.reward(0, 0) + mdp.reward(s.state(0, &[0]).unwrap(), 1);
        assert_eq!(mdp.trajectory_return(&stop).unwrap(), first_two);
        // Continuing with a non-EOS token after EOS is impossible.
        let invalid = Trajectory {
            prompt: 0,
            actions: vec![1, 0, 1],
        };
        assert_eq!(mdp.reference().trajectory_log_prob(&invalid).unwrap(), f64::NEG_INFINITY);
        let sol = soft_backward_induction(&mdp, 1.0).unwrap();
        let rep = telescoping_check(&mdp, &sol, &[invalid, stop]).unwrap();
        assert_eq!((rep.checked, rep.skipped), (1, 1));
        // EOS first: 1 path. Non-EOS then EOS: 2. Two non-EOS tokens then anything: 12.
        assert_eq!(mdp.trajectories(0).unwrap().len(), 1 + 2 + 2 * 2 * 3);
    }

    #[test]
    fn token_jstar_identities() {
        let mut rng = SeededRng::new(5, 6);
        for eos in [None, Some(0)] {
            let mdp = TokenMdp::<f64>::random(shape(3, 3, 2), eos, &mut rng).unwrap();
            let pi_cal = mdp.reference().clone();
            let beta = 1.7;
            let flat = mdp.map_rewards(|_, _, _| 0.0).unwrap();
            assert!(token_jstar(&flat, beta, &pi_cal).unwrap().abs() < 1e-12);

            let sol = soft_backward_induction(&mdp, beta).unwrap();
            let ev = (sol.root_value(0) + sol.root_value(1)) / 2.0;
            let mean = expected_return(&mdp, &pi_cal).unwrap();
            let raw = token_jstar(&mdp, beta, &pi_cal).unwrap();
            assert!((ev - raw - mean).abs() < 1e-10);

            let (cal, removed) = calibrate_token_reward(&mdp, &pi_cal).unwrap();
            assert_eq!(removed, mean);
            assert!(expected_return(&cal, &pi_cal).unwrap().abs() < 1e-12);
            let cal_sol = soft_backward_induction(&cal, beta).unwrap();
            let cal_ev = (cal_sol.root_value(0) + cal_sol.root_value(1)) / 2.0;
            assert!((token_jstar(&cal, beta, &pi_cal).unwrap() - cal_ev).abs() < 1e-10);
        }
    }

    #[test]
    fn token_loss_reductions() {
        let mut rng = SeededRng::new(6, 6);
        let mdp = TokenMdp::<f64>::random(shape(3, 3, 2), None, &mut rng).unwrap();
        let reference = mdp.reference().clone();
        let data = mdp.sample_pairs(&reference, 9, &mut rng).unwrap();
        let cfg = VpoConfig::new(0.6, 1.5, Sign::Online).unwrap();
        let at_ref = token_vpo_loss(&reference, &reference, &reference, &cfg, &data).unwrap();
        assert!((at_ref - 9.0 * 2f64.ln()).abs() < 1e-12);

        let mismatched = vec![TrajectoryPair {
            preferred: Trajectory {
                prompt: 0,
                actions: vec![0, 0, 0],
            },
            unpreferred: Trajectory {
                prompt: 1,
                actions: vec![0, 0, 0],
            },
        }];
        assert!(token_vpo_loss(&reference, &reference, &reference, &cfg, &mismatched).is_err());
    }

    #[test]
    fn one_step_matches_bandit_loss_bitwise() {
        let mut rng = SeededRng::new(7, 6);
        for trial in 0..20 {
            let k = 2 + trial % 5;
            let s = shape(k, 1, 1);
            let theta: Vec<f64> = (0..k).map(|_| rng.standard_normal()).collect();
            let theta_ref: Vec<f64> = (0..k).map(|_| rng.uniform()).collect();
            let theta_cal: Vec<f64> = (0..k).map(|_| rng.standard_normal()).collect();
            let n = 1 + trial;
            let pairs: Vec<(usize, usize)> = (0..n)
                .map(|_| ((rng.next_u64() % k as u64) as usize, (rng.next_u64() % k as u64) as usize))
                .collect();
            let sign = if trial % 2 == 0 { Sign::Online } else { Sign::Offline };
            let cfg = VpoConfig::new(0.1 * trial as f64, 1.0 + trial as f64 * 0.2, sign).unwrap();

            let token = token_vpo_loss(
                &TokenPolicy::from_logits(s, theta.clone()).unwrap(),
                &TokenPolicy::from_logits(s, theta_ref.clone()).unwrap(),
                &TokenPolicy::from_logits(s, theta_cal.clone()).unwrap(),
                &cfg,
                &pairs
                    .iter()
                    .map(|&(p, m)| TrajectoryPair {
                        preferred: Trajectory {
                            prompt: 0,
                            actions: vec![p],
                        },
                        unpreferred: Trajectory {
                            prompt: 0,
                            actions: vec![m],
                        },
                    })
                    .collect::<Vec<_>>(),
            )
            .unwrap();
            let data = PreferenceDataset::from_samples(
                pairs
                    .iter()
                    .map(|&(p, m)| PreferenceSample {
                        context: vec![],
                        preferred: p,
                        unpreferred: m,
                    })
                    .collect(),
            );
            let bandit = vpo_loss(
                &Policy::tabular(theta).unwrap(),
                &Policy::tabular(theta_ref).unwrap(),
                &Calibration::Policy(Policy::tabular(theta_cal).unwrap()),
                &cfg,
                &data,
                &ContextBatch::singleton_empty(),
            )
            .unwrap();
            assert_eq!(token.to_bits(), bandit.total.to_bits());
        }
    }

    #[test]
    fn json_round_trip() {
        let mut rng = SeededRng::new(8, 6);
        let mdp = TokenMdp::<f64>::random(shape(2, 3, 2), Some(1), &mut rng).unwrap();
        let text = mdp.to_json().unwrap();
        let back = TokenMdp::<f64>::from_json(&text).unwrap();
        assert_eq!(back, mdp);
        assert!(TokenMdp::<f64>::from_json(&text.replace("\"horizon\"", "\"depth\"")).is_err());
    }

    #[test]
    fn rejects_bad_inputs() {
        let s = shape(2, 2, 1);
        let n = s.state_count() * 2;
        assert!(TokenMdp::<f64>::new(s, None, vec![0.0; n - 1], vec![0.5; n]).is_err());
        assert!(TokenMdp::<f64>::new(s, None, vec![0.0; n], vec![0.7; n]).is_err());
        assert!(TokenMdp::<f64>::new(s, Some(2), vec![0.0; n], vec![0.5; n]).is_err());
        let mdp = TokenMdp::<f64>::new(s, None, vec![0.0; n], vec![0.5; n]).unwrap();
        assert!(soft_backward_induction(&mdp, 0.0).is_err());
        assert!(trajectory_logsumexp_oracle(&mdp, 0, -1.0).is_err());
    }
}
