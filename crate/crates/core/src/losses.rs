//! Preference losses in policy space.
//!
//! The VPO objective is the DPO negative log-likelihood plus a value bias
//! written through the calibration policy:
//!
//! ```text
//! L(π) = −Σ_i log σ(β log π/π_ref (y₊ⁱ|xⁱ) − β log π/π_ref (y₋ⁱ|xⁱ))
//!        + sign · α · β · E_{x, y∼π_cal}[log π(y|x) − log π_ref(y|x)]
//! ```
//!
//! with `sign = +1` online (optimism) and `−1` offline (pessimism).
//! [`VpoObjective`] caches per-prompt features and reference log-probs so a
//! training loop can evaluate the loss and its gradient repeatedly.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::environments::{PreferenceDataset, PreferenceSample};
use crate::error::{invalid, Result, VpoError};
use crate::numerics::{dot, log_softmax_and_probs, sigmoid, softplus, Scalar};
use crate::policy_value::{ConditionalDist, ContextBatch, Policy, PolicyKind};

/// Direction of the value bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sign {
    /// `+1`: favour high-value rewards (pushes `π` away from `π_cal`).
    Online,
    /// `−1`: avoid high-value rewards (pulls `π` towards `π_cal`).
    Offline,
}

impl Sign {
    pub fn value<T: Scalar>(self) -> T {
        match self {
            Sign::Online => T::one(),
            Sign::Offline => -T::one(),
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Sign::Online => Sign::Offline,
            Sign::Offline => Sign::Online,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VpoConfig<T> {
    pub alpha: T,
    pub beta: T,
    pub sign: Sign,
}

impl<T: Scalar> VpoConfig<T> {
    pub fn new(alpha: T, beta: T, sign: Sign) -> Result<Self> {
        let cfg = Self { alpha, beta, sign };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= T::zero()) || !self.alpha.is_finite() {
            return Err(invalid(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.beta > T::zero()) || !self.beta.is_finite() {
            return Err(invalid(format!("beta must be > 0, got {}", self.beta)));
        }
        Ok(())
    }

    /// Coefficient `sign · α · β` of the regularizer.
    pub fn reg_weight(&self) -> T {
        self.sign.value::<T>() * self.alpha * self.beta
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport<T> {
    pub total: T,
    pub nll_part: T,
    pub regularizer_part: T,
    pub gradient: Vec<T>,
}

/// Where the calibration distribution comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum Calibration<T> {
    /// `π_cal = π_ref`.
    Reference,
    /// An explicit calibration policy.
    Policy(Policy<T>),
    /// The marginal of `(x, y₊)` in the preference data.
    EmpiricalPositive,
}

/// Prompts used for `E_{x∼ρ}` in the regularizer.
#[derive(Debug, Clone, PartialEq)]
pub enum RegContexts<T> {
    /// A fixed batch (for example the evaluation batch).
    Batch(ContextBatch<T>),
    /// The prompts of the preference data, one per sample.
    Dataset,
}

/// `m = β(log π(y₊) − log π_ref(y₊)) − β(log π(y₋) − log π_ref(y₋))`.
#[inline]
pub(crate) fn pair_margin<T: Scalar>(beta: T, plus_ratio: T, minus_ratio: T) -> T {
    beta * plus_ratio - beta * minus_ratio
}

/// `−log σ(m)`.
#[inline]
pub(crate) fn nll_term<T: Scalar>(margin: T) -> T {
    softplus(-margin)
}

/// `nll + sign·α·β·reg`.
#[inline]
pub(crate) fn combine<T: Scalar>(nll: T, reg: T, cfg: &VpoConfig<T>) -> T {
    nll + cfg.reg_weight() * reg
}

/// DPO negative log-likelihood of `data` under `π`.
pub fn dpo_nll<T: Scalar>(
    pi: &Policy<T>,
    pi_ref: &Policy<T>,
    beta: T,
    data: &PreferenceDataset<T>,
) -> Result<T> {
    if !(beta > T::zero()) {
        return Err(invalid(format!("beta must be > 0, got {beta}")));
    }
    let mut total = T::zero();
    let mut cached: Option<(&[T], Vec<T>, Vec<T>)> = None;
    for s in data.iter() {
        let fresh = !matches!(&cached, Some((x, _, _)) if *x == s.context.as_slice());
        if fresh {
            cached = Some((&s.context, pi.log_probs(&s.context)?, pi_ref.log_probs(&s.context)?));
        }
        let (_, lp, lr) = cached.as_ref().expect("filled above");
        check_arms(s, lp.len())?;
        let m = pair_margin(
            beta,
            lp[s.preferred] - lr[s.preferred],
            lp[s.unpreferred] - lr[s.unpreferred],
        );
        total = total + nll_term(m);
    }
    Ok(total)
}

fn check_arms<T>(s: &PreferenceSample<T>, arms: usize) -> Result<()> {
    if s.preferred >= arms || s.unpreferred >= arms {
        return Err(invalid(format!(
            "sample arms ({}, {}) out of range for {arms} arms",
            s.preferred, s.unpreferred
        )));
    }
    Ok(())
}

/// `E_{x, y∼π_cal}[log π(y|x) − log π_ref(y|x)]`, exact over arms.
pub fn calibration_regularizer<T: Scalar>(
    pi: &Policy<T>,
    pi_ref: &Policy<T>,
    pi_cal: &impl ConditionalDist<T>,
    batch: &ContextBatch<T>,
) -> Result<T> {
    let mut acc = T::zero();
    for x in batch.contexts() {
        let lp = pi.log_probs(x)?;
        let lr = pi_ref.log_probs(x)?;
        let w = pi_cal.dist(x)?;
        if w.len() != lp.len() {
            return Err(invalid("calibration policy and policy disagree on the arm count"));
        }
        let mut inner = T::zero();
        for y in 0..lp.len() {
            inner = inner + w[y] * (lp[y] - lr[y]);
        }
        acc = acc + inner;
    }
    Ok(acc / T::count(batch.len()))
}

/// `∇_θ log π_θ(y|x)`.
pub fn grad_log_prob<T: Scalar>(pi: &Policy<T>, x: &[T], y: usize) -> Result<Vec<T>> {
    let probs = pi.probs(x)?;
    if y >= probs.len() {
        return Err(invalid(format!("arm {y} out of range for {} arms", probs.len())));
    }
    match pi.kind() {
        PolicyKind::TabularSoftmax => Ok(probs
            .iter()
            .enumerate()
            .map(|(i, &p)| if i == y { T::one() - p } else { -p })
            .collect()),
        PolicyKind::LogLinear => {
            let fm = pi.feature_map_required()?;
            let d = fm.hidden_dim();
            let phi = fm.feature_matrix(x)?;
            let mut g = phi[y * d..(y + 1) * d].to_vec();
            for (row, &p) in phi.chunks(d).zip(probs.iter()) {
                for (gi, &f) in g.iter_mut().zip(row) {
                    *gi = *gi - p * f;
                }
            }
            Ok(g)
        }
    }
}

/// Total, parts and analytic gradient of the VPO objective at `π`.
///
/// The value uses the same arithmetic as [`dpo_nll`] and
/// [`calibration_regularizer`]; the gradient comes from [`VpoObjective`].
pub fn vpo_loss<T: Scalar>(
    pi: &Policy<T>,
    pi_ref: &Policy<T>,
    pi_cal: &Calibration<T>,
    cfg: &VpoConfig<T>,
    data: &PreferenceDataset<T>,
    batch: &ContextBatch<T>,
) -> Result<LossReport<T>> {
    cfg.validate()?;
    let nll = dpo_nll(pi, pi_ref, cfg.beta, data)?;
    let reg = match pi_cal {
        Calibration::Reference => calibration_regularizer(pi, pi_ref, pi_ref, batch)?,
        Calibration::Policy(cal) => calibration_regularizer(pi, pi_ref, cal, batch)?,
        Calibration::EmpiricalPositive => empirical_positive_regularizer(pi, pi_ref, data)?,
    };
    let mut objective = VpoObjective::new(pi_ref, pi_cal.clone(), *cfg, RegContexts::Batch(batch.clone()))?;
    objective.extend(data)?;
    let gradient = objective.evaluate(pi.theta())?.gradient;
    Ok(LossReport {
        total: combine(nll, reg, cfg),
        nll_part: nll,
        regularizer_part: reg,
        gradient,
    })
}

/// `(1/N) Σ_i [log π(y₊ⁱ|xⁱ) − log π_ref(y₊ⁱ|xⁱ)]`, zero on empty data.
fn empirical_positive_regularizer<T: Scalar>(
    pi: &Policy<T>,
    pi_ref: &Policy<T>,
    data: &PreferenceDataset<T>,
) -> Result<T> {
    if data.is_empty() {
        return Ok(T::zero());
    }
    let mut acc = T::zero();
    for s in data.iter() {
        let lp = pi.log_probs(&s.context)?;
        let lr = pi_ref.log_probs(&s.context)?;
        check_arms(s, lp.len())?;
        acc = acc + (lp[s.preferred] - lr[s.preferred]);
    }
    Ok(acc / T::count(data.len()))
}

/// Analytic gradient of [`vpo_loss`] with respect to `π`'s parameters.
pub fn grad_vpo<T: Scalar>(
    pi: &Policy<T>,
    pi_ref: &Policy<T>,
    pi_cal: &Calibration<T>,
    cfg: &VpoConfig<T>,
    data: &PreferenceDataset<T>,
    batch: &ContextBatch<T>,
) -> Result<Vec<T>> {
    Ok(vpo_loss(pi, pi_ref, pi_cal, cfg, data, batch)?.gradient)
}

#[derive(Debug, Clone)]
struct CachedContext<T> {
    context: Vec<T>,
    /// Row-major `arm_count × dim` feature block (log-linear only).
    features: Vec<T>,
    log_ref: Vec<T>,
    cal_probs: Option<Vec<T>>,
}

/// A distinct `(prompt, y₊, y₋)` triple and how often it occurs.
#[derive(Debug, Clone, Copy)]
struct CachedPair {
    ctx: usize,
    preferred: usize,
    unpreferred: usize,
    count: usize,
}

#[derive(Debug, Clone)]
struct RegTerm<T> {
    ctx: usize,
    /// Unnormalized calibration weights over arms.
    weights: Vec<T>,
    mass: T,
    /// `Σ_y w_y log π_ref(y|x)`.
    weighted_log_ref: T,
    /// `Σ_y w_y φ(x, y)` (log-linear only).
    weighted_features: Vec<T>,
}

/// The VPO objective over a growing preference dataset, as a function of
/// the policy parameters.
///
/// Samples, distinct pairs and regularizer terms are all stored in
/// non-decreasing prompt order, so one pass over the prompts evaluates
/// everything while each feature block is hot.
#[derive(Debug, Clone)]
pub struct VpoObjective<T> {
    reference: Policy<T>,
    calibration: Calibration<T>,
    cfg: VpoConfig<T>,
    reg_from_dataset: bool,
    arm_count: usize,
    dim: usize,
    contexts: Vec<CachedContext<T>>,
    /// Pair id of every sample, in insertion order.
    samples: Vec<usize>,
    pairs: Vec<CachedPair>,
    pair_ids: HashMap<(usize, usize, usize), usize>,
    reg_terms: Vec<RegTerm<T>>,
    reg_mass: T,
    /// `Σ_terms Σ_y w_y ∇ logit_y`, the θ-independent part of the regularizer gradient.
    reg_grad_offset: Vec<T>,
}

impl<T: Scalar> VpoObjective<T> {
    /// `reference` fixes the policy class; the trainable policy must be of
    /// the same kind and feature map.
    pub fn new(
        reference: &Policy<T>,
        calibration: Calibration<T>,
        cfg: VpoConfig<T>,
        reg_contexts: RegContexts<T>,
    ) -> Result<Self> {
        cfg.validate()?;
        let arm_count = reference.arm_count()?;
        if let Calibration::Policy(cal) = &calibration {
            if cal.arm_count()? != arm_count {
                return Err(invalid("calibration policy and reference disagree on the arm count"));
            }
        }
        let mut objective = Self {
            reference: reference.clone(),
            calibration,
            cfg,
            reg_from_dataset: matches!(reg_contexts, RegContexts::Dataset),
            arm_count,
            dim: reference.theta().len(),
            contexts: Vec::new(),
            samples: Vec::new(),
            pairs: Vec::new(),
            pair_ids: HashMap::new(),
            reg_terms: Vec::new(),
            reg_mass: T::zero(),
            reg_grad_offset: vec![T::zero(); reference.theta().len()],
        };
        if let RegContexts::Batch(batch) = reg_contexts {
            if !matches!(objective.calibration, Calibration::EmpiricalPositive) {
                for x in batch.contexts() {
                    let ctx = objective.context_index(x, true)?;
                    let w = objective.contexts[ctx].cal_probs.clone().expect("requested above");
                    objective.add_reg(ctx, w);
                }
            }
        }
        Ok(objective)
    }

    pub fn config(&self) -> &VpoConfig<T> {
        &self.cfg
    }

    pub fn set_alpha(&mut self, alpha: T) -> Result<()> {
        let cfg = VpoConfig { alpha, ..self.cfg };
        cfg.validate()?;
        self.cfg = cfg;
        Ok(())
    }

    pub fn param_len(&self) -> usize {
        self.dim
    }

    pub fn sample_count(&self) -> usize {
        self.samples.len()
    }

    /// Index of the cached entry for `x`, reusing the most recent one when
    /// the prompt repeats.
    fn context_index(&mut self, x: &[T], need_cal: bool) -> Result<usize> {
        if let Some(last) = self.contexts.last_mut() {
            if last.context == x {
                if need_cal && last.cal_probs.is_none() {
                    last.cal_probs = Some(cal_weights(&self.calibration, x, &last.log_ref)?);
                }
                return Ok(self.contexts.len() - 1);
            }
        }
        let features = match self.reference.kind() {
            PolicyKind::TabularSoftmax => Vec::new(),
            PolicyKind::LogLinear => self.reference.feature_map_required()?.feature_matrix(x)?,
        };
        let log_ref = self.reference.log_probs(x)?;
        let cal_probs = if need_cal {
            Some(cal_weights(&self.calibration, x, &log_ref)?)
        } else {
            None
        };
        self.contexts.push(CachedContext {
            context: x.to_vec(),
            features,
            log_ref,
            cal_probs,
        });
        Ok(self.contexts.len() - 1)
    }

    fn add_reg(&mut self, ctx: usize, weights: Vec<T>) {
        let mass: T = weights.iter().copied().sum();
        let cached = &self.contexts[ctx];
        let weighted_log_ref = dot(&weights, &cached.log_ref);
        let weighted_features = match self.reference.kind() {
            PolicyKind::TabularSoftmax => weights.clone(),
            PolicyKind::LogLinear => {
                let mut acc = vec![T::zero(); self.dim];
                for (row, &w) in cached.features.chunks_exact(self.dim).zip(&weights) {
                    for (a, &f) in acc.iter_mut().zip(row) {
                        *a = *a + w * f;
                    }
                }
                acc
            }
        };
        for (g, &v) in self.reg_grad_offset.iter_mut().zip(&weighted_features) {
            *g = *g + v;
        }
        self.reg_mass = self.reg_mass + mass;
        if let Some(last) = self.reg_terms.last_mut() {
            debug_assert!(last.ctx <= ctx, "regularizer terms must arrive in prompt order");
            if last.ctx == ctx {
                for (a, &b) in last.weights.iter_mut().zip(&weights) {
                    *a = *a + b;
                }
                for (a, &b) in last.weighted_features.iter_mut().zip(&weighted_features) {
                    *a = *a + b;
                }
                last.mass = last.mass + mass;
                last.weighted_log_ref = last.weighted_log_ref + weighted_log_ref;
                return;
            }
        }
        self.reg_terms.push(RegTerm {
            ctx,
            weights,
            mass,
            weighted_log_ref,
            weighted_features,
        });
    }

    /// Appends one comparison.
    pub fn push(&mut self, sample: &PreferenceSample<T>) -> Result<()> {
        check_arms(sample, self.arm_count)?;
        let need_cal = self.reg_from_dataset && !matches!(self.calibration, Calibration::EmpiricalPositive);
        let ctx = self.context_index(&sample.context, need_cal)?;
        let key = (ctx, sample.preferred, sample.unpreferred);
        let id = match self.pair_ids.get(&key) {
            Some(&id) => id,
            None => {
                self.pairs.push(CachedPair {
                    ctx,
                    preferred: sample.preferred,
                    unpreferred: sample.unpreferred,
                    count: 0,
                });
                self.pair_ids.insert(key, self.pairs.len() - 1);
                self.pairs.len() - 1
            }
        };
        self.pairs[id].count += 1;
        self.samples.push(id);
        if matches!(self.calibration, Calibration::EmpiricalPositive) {
            let mut w = vec![T::zero(); self.arm_count];
            w[sample.preferred] = T::one();
            self.add_reg(ctx, w);
        } else if self.reg_from_dataset {
            let w = self.contexts[ctx].cal_probs.clone().expect("requested above");
            self.add_reg(ctx, w);
        }
        Ok(())
    }

    pub fn extend(&mut self, data: &PreferenceDataset<T>) -> Result<()> {
        data.iter().try_for_each(|s| self.push(s))
    }

    /// Loss and gradient at parameters `theta`.
    pub fn evaluate(&self, theta: &[T]) -> Result<LossReport<T>> {
        self.evaluate_parts(theta, true)
    }

    /// Total loss and gradient, skipping the regularizer when its weight is
    /// zero. The total is identical to [`Self::evaluate`]'s.
    pub fn loss_and_gradient(&self, theta: &[T]) -> Result<(T, Vec<T>)> {
        let with_reg = self.cfg.reg_weight() != T::zero();
        let report = self.evaluate_parts(theta, with_reg)?;
        Ok((report.total, report.gradient))
    }

    fn evaluate_parts(&self, theta: &[T], with_reg: bool) -> Result<LossReport<T>> {
        if theta.len() != self.dim {
            return Err(invalid(format!(
                "parameter length {} differs from objective's {}",
                theta.len(),
                self.dim
            )));
        }
        if let Some(index) = theta.iter().position(|t| !t.is_finite()) {
            return Err(VpoError::NonFinite {
                index,
                context: "policy parameters".into(),
            });
        }
        let (k, d) = (self.arm_count, self.dim);
        let tabular = self.reference.kind() == PolicyKind::TabularSoftmax;
        let beta = self.cfg.beta;
        let mut logits = vec![T::zero(); k];
        let mut lp = vec![T::zero(); k];
        let mut probs = vec![T::zero(); k];
        let mut pair_terms = vec![T::zero(); self.pairs.len()];
        let mut grad_nll = vec![T::zero(); d];
        let mut grad_reg = vec![T::zero(); d];
        let mut reg = T::zero();
        let (mut next_pair, mut next_term) = (0, 0);

        for (c, cached) in self.contexts.iter().enumerate() {
            let pair_end = next_pair + self.pairs[next_pair..].iter().take_while(|p| p.ctx == c).count();
            let term_end = if with_reg {
                next_term + self.reg_terms[next_term..].iter().take_while(|t| t.ctx == c).count()
            } else {
                next_term
            };
            if pair_end == next_pair && term_end == next_term {
                continue;
            }
            let phi = &cached.features;
            if tabular {
                logits.copy_from_slice(theta);
            } else {
                for (l, row) in logits.iter_mut().zip(phi.chunks_exact(d)) {
                    *l = dot(row, theta);
                }
            }
            let lse = log_softmax_and_probs(&logits, &mut lp, &mut probs);
            let lr = &cached.log_ref;

            for (id, pair) in self.pairs[next_pair..pair_end].iter().enumerate() {
                let (yp, ym) = (pair.preferred, pair.unpreferred);
                let m = pair_margin(beta, lp[yp] - lr[yp], lp[ym] - lr[ym]);
                pair_terms[next_pair + id] = nll_term(m);
                // d/dm −log σ(m) = −σ(−m); the score difference is free of the normalizer.
                let coef = -sigmoid(-m) * beta * T::count(pair.count);
                if tabular {
                    grad_nll[yp] = grad_nll[yp] + coef;
                    grad_nll[ym] = grad_nll[ym] - coef;
                } else {
                    let (plus, minus) = (&phi[yp * d..(yp + 1) * d], &phi[ym * d..(ym + 1) * d]);
                    for ((g, &a), &b) in grad_nll.iter_mut().zip(plus).zip(minus) {
                        *g = *g + coef * (a - b);
                    }
                }
            }

            // Σ_y w_y (log π − log π_ref) = Σ_y w_y logit_y − W lse − Σ_y w_y log π_ref, and the
            // gradient Σ_y (w_y − W π_y) ∇ logit_y has a constant part kept in `reg_grad_offset`.
            for term in &self.reg_terms[next_term..term_end] {
                reg = reg + dot(&term.weighted_features, theta)
                    - term.mass * lse
                    - term.weighted_log_ref;
                if tabular {
                    for (g, &p) in grad_reg.iter_mut().zip(&probs) {
                        *g = *g - term.mass * p;
                    }
                } else {
                    for (row, &p) in phi.chunks_exact(d).zip(&probs) {
                        let c = term.mass * p;
                        for (g, &f) in grad_reg.iter_mut().zip(row) {
                            *g = *g - c * f;
                        }
                    }
                }
            }
            next_pair = pair_end;
            next_term = term_end;
        }

        let nll = self.samples.iter().fold(T::zero(), |acc, &id| acc + pair_terms[id]);
        if with_reg && self.reg_mass > T::zero() {
            reg = reg / self.reg_mass;
            for (g, &offset) in grad_reg.iter_mut().zip(&self.reg_grad_offset) {
                *g = (*g + offset) / self.reg_mass;
            }
        } else {
            reg = T::zero();
        }
        let w = self.cfg.reg_weight();
        let gradient = grad_nll.iter().zip(&grad_reg).map(|(&a, &b)| a + w * b).collect();
        Ok(LossReport {
            total: combine(nll, reg, &self.cfg),
            nll_part: nll,
            regularizer_part: reg,
            gradient,
        })
    }
}

fn cal_weights<T: Scalar>(calibration: &Calibration<T>, x: &[T], log_ref: &[T]) -> Result<Vec<T>> {
    match calibration {
        Calibration::Reference => Ok(log_ref.iter().map(|l| l.exp()).collect()),
        Calibration::Policy(cal) => Ok(cal.probs(x)?.into_vec()),
        Calibration::EmpiricalPositive => unreachable!("empirical calibration has no per-prompt weights"),
    }
}
