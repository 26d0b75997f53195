//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, VpoError};
use crate::numerics::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.weight_decay.is_finite();
        if ok {
            Ok(())
        } else {
            Err(invalid(format!("invalid AdamW hyperparameters: {self:?}")))
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct AdamWState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

impl<T: Scalar> AdamWState<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            m: vec![T::zero(); dim],
            v: vec![T::zero(); dim],
            step: 0,
        }
    }
}

/// One AdamW update in place.
///
/// ```text
/// m ← β1 m + (1−β1) g,   v ← β2 v + (1−β2) g²
/// θ ← θ − lr · m̂ / (√v̂ + ε) − lr · wd · θ
/// ```
///
/// The decay term uses the parameters from before the step.
pub fn adamw_step<T: Scalar>(
    params: &mut [T],
    grad: &[T],
    state: &mut AdamWState<T>,
    cfg: &AdamWConfig,
) -> Result<()> {
    if grad.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(invalid(format!(
            "length mismatch: params {}, grad {}, state {}",
            params.len(),
            grad.len(),
            state.m.len()
        )));
    }
    if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
        return Err(VpoError::NonFinite {
            index,
            context: "gradient".into(),
        });
    }
    state.step += 1;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let (lr, eps, wd) = (T::of(cfg.lr), T::of(cfg.eps), T::of(cfg.weight_decay));
    let t = state.step as i32;
    let bias1 = T::one() - b1.powi(t);
    let bias2 = T::one() - b2.powi(t);
    for i in 0..params.len() {
        let g = grad[i];
        state.m[i] = b1 * state.m[i] + (T::one() - b1) * g;
        state.v[i] = b2 * state.v[i] + (T::one() - b2) * g * g;
        let m_hat = state.m[i] / bias1;
        let v_hat = state.v[i] / bias2;
        let old = params[i];
        params[i] = old - lr * m_hat / (v_hat.sqrt() + eps) - lr * wd * old;
    }
    Ok(())
}
