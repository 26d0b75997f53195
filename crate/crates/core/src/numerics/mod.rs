//! Scalar and vector primitives used throughout the crate.
//!
//! Everything here is a pure function. Log-domain helpers shift by the
//! maximum before exponentiating so that large logits never overflow.

mod gradcheck;
mod rng;
mod scalar;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, VpoError};

pub use gradcheck::{finite_diff_grad, relative_sup_error, DEFAULT_FD_STEP};
pub use rng::{SeededRng, Stream};
pub use scalar::Scalar;

/// Floor applied to Bernoulli parameters before taking square roots or logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// A probability vector: non-negative entries summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
#[serde(bound = "T: Scalar")]
pub struct ProbVec<T> {
    entries: Vec<T>,
}

impl<T: Scalar> ProbVec<T> {
    /// Validates and wraps `entries`.
    pub fn new(entries: Vec<T>) -> Result<Self> {
        if entries.is_empty() {
            return Err(invalid("probability vector must be non-empty"));
        }
        if let Some(i) = entries.iter().position(|p| !p.is_finite() || *p < T::zero()) {
            return Err(VpoError::Domain(format!(
                "probability entry {i} is {} (must be finite and >= 0)",
                entries[i]
            )));
        }
        let total: T = entries.iter().copied().sum();
        let tol = T::epsilon().sqrt();
        if (total - T::one()).abs() > tol {
            return Err(VpoError::Domain(format!(
                "probability vector sums to {total}, not 1"
            )));
        }
        Ok(Self { entries })
    }

    /// Uniform distribution over `n` outcomes.
    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(invalid("uniform distribution needs at least one outcome"));
        }
        Ok(Self {
            entries: vec![T::one() / T::count(n); n],
        })
    }

    /// Point mass on outcome `i` of `n`.
    pub fn point_mass(n: usize, i: usize) -> Result<Self> {
        if i >= n {
            return Err(invalid(format!("point mass index {i} out of range for {n} outcomes")));
        }
        let mut entries = vec![T::zero(); n];
        entries[i] = T::one();
        Ok(Self { entries })
    }

    pub(crate) fn from_raw(entries: Vec<T>) -> Self {
        Self { entries }
    }

    pub fn as_slice(&self) -> &[T] {
        &self.entries
    }

    pub fn into_vec(self) -> Vec<T> {
        self.entries
    }
}

impl<T> std::ops::Deref for ProbVec<T> {
    type Target = [T];

    fn deref(&self) -> &[T] {
        &self.entries
    }
}

fn check_finite<T: Scalar>(v: &[T], what: &str) -> Result<()> {
    if v.is_empty() {
        return Err(invalid(format!("{what}: input must be non-empty")));
    }
    if let Some(index) = v.iter().position(|x| !x.is_finite()) {
        return Err(VpoError::NonFinite {
            index,
            context: what.to_string(),
        });
    }
    Ok(())
}

fn max_entry<T: Scalar>(v: &[T]) -> T {
    v.iter().copied().fold(T::neg_infinity(), T::max)
}

/// `log Σ exp(v_i)`, evaluated with a max shift.
pub fn log_sum_exp<T: Scalar>(v: &[T]) -> Result<T> {
    check_finite(v, "log_sum_exp")?;
    Ok(lse_unchecked(v))
}

/// Max-shifted log-sum-exp that tolerates `-inf` entries (zero-mass terms).
/// Callers guarantee at least one finite entry.
pub(crate) fn lse_unchecked<T: Scalar>(v: &[T]) -> T {
    if v.len() == 1 {
        return v[0];
    }
    let m = max_entry(v);
    if m == T::neg_infinity() {
        return m;
    }
    let s: T = v.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

/// Softmax of `v`.
pub fn softmax<T: Scalar>(v: &[T]) -> Result<ProbVec<T>> {
    check_finite(v, "softmax")?;
    Ok(softmax_unchecked(v))
}

pub(crate) fn softmax_unchecked<T: Scalar>(v: &[T]) -> ProbVec<T> {
    let m = max_entry(v);
    let mut out: Vec<T> = v.iter().map(|&x| (x - m).exp()).collect();
    let s: T = out.iter().copied().sum();
    for p in &mut out {
        *p = *p / s;
    }
    ProbVec::from_raw(out)
}

/// `v_i − log Σ exp(v)` for every entry.
pub fn log_softmax<T: Scalar>(v: &[T]) -> Result<Vec<T>> {
    check_finite(v, "log_softmax")?;
    Ok(log_softmax_unchecked(v))
}

pub(crate) fn log_softmax_unchecked<T: Scalar>(v: &[T]) -> Vec<T> {
    let lse = lse_unchecked(v);
    v.iter().map(|&x| x - lse).collect()
}

/// Writes `log_softmax(v)` into `log_p` and `softmax(v)` into `p` from one
/// set of exponentials, and returns `log Σ exp(v)`. `log_p` matches
/// [`log_softmax_unchecked`] bit for bit.
pub(crate) fn log_softmax_and_probs<T: Scalar>(v: &[T], log_p: &mut [T], p: &mut [T]) -> T {
    if v.len() == 1 {
        log_p[0] = T::zero();
        p[0] = T::one();
        return v[0];
    }
    let m = max_entry(v);
    for (pi, &x) in p.iter_mut().zip(v) {
        *pi = (x - m).exp();
    }
    let s: T = p.iter().copied().sum();
    let lse = m + s.ln();
    for ((lp, pi), &x) in log_p.iter_mut().zip(p.iter_mut()).zip(v) {
        *lp = x - lse;
        *pi = *pi / s;
    }
    lse
}

/// Logistic function, kept strictly inside `(0, 1)` for every finite input.
pub fn sigmoid<T: Scalar>(z: T) -> T {
    let raw = if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    };
    let upper = T::one() - T::epsilon() / T::of(2.0);
    raw.max(T::min_positive_value()).min(upper)
}

/// `log σ(z)` without forming `σ(z)`.
pub fn log_sigmoid<T: Scalar>(z: T) -> T {
    -softplus(-z)
}

/// `log(1 + e^z)`.
pub fn softplus<T: Scalar>(z: T) -> T {
    z.max(T::zero()) + (-z.abs()).exp().ln_1p()
}

/// Squared Hellinger distance between two Bernoulli distributions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HellingerSq<T> {
    pub value: T,
    /// Set when either argument had to be pulled into `[1e-12, 1 − 1e-12]`.
    pub clamped: bool,
}

/// `½[(√p − √q)² + (√(1−p) − √(1−q))²]`.
pub fn bernoulli_hellinger_sq<T: Scalar>(p: T, q: T) -> HellingerSq<T> {
    let lo = T::of(PROB_FLOOR);
    let hi = T::one() - lo;
    let clamp = |x: T| x.max(lo).min(hi);
    let (pc, qc) = (clamp(p), clamp(q));
    let clamped = pc != p || qc != q;
    let a = pc.sqrt() - qc.sqrt();
    let b = (T::one() - pc).sqrt() - (T::one() - qc).sqrt();
    HellingerSq {
        value: T::of(0.5) * (a * a + b * b),
        clamped,
    }
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub fn sup_norm<T: Scalar>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |acc, x| acc.max(x.abs()))
}

/// Kullback-Leibler divergence `Σ p log(p/q)`; zero-mass terms of `p` contribute 0.
pub fn kl_divergence<T: Scalar>(p: &[T], q: &[T]) -> Result<T> {
    if p.len() != q.len() {
        return Err(invalid(format!(
            "KL arguments differ in length ({} vs {})",
            p.len(),
            q.len()
        )));
    }
    let mut acc = T::zero();
    for (i, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi <= T::zero() {
            continue;
        }
        if qi <= T::zero() {
            return Err(VpoError::Domain(format!(
                "KL support violation at outcome {i}: p = {pi}, q = 0"
            )));
        }
        acc = acc + pi * (pi.ln() - qi.ln());
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    #[test]
    fn fused_log_softmax_matches() {
        let v = [0.3_f64, -2.0, 1.7, 0.0, 5.5];
        let (mut lp, mut p) = ([0.0; 5], [0.0; 5]);
        super::log_softmax_and_probs(&v, &mut lp, &mut p);
        assert_eq!(lp.to_vec(), super::log_softmax_unchecked(&v));
        for (a, b) in p.iter().zip(super::softmax_unchecked(&v).iter()) {
            assert!((a - b).abs() < 1e-16);
        }
        let (mut lp, mut p) = ([1.0; 1], [0.0; 1]);
        super::log_softmax_and_probs(&[4.0_f64], &mut lp, &mut p);
        assert_eq!((lp[0], p[0]), (0.0, 1.0));
    }

    use super::*;
    use proptest::prelude::*;

    #[test]
    fn lse_of_equal_entries() {
        let v = log_sum_exp(&[0.0_f64, 0.0]).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-15);
        assert_eq!(log_sum_exp(&[-3.25_f64]).unwrap(), -3.25);
        let big = log_sum_exp(&[1000.0_f64, 1000.0]).unwrap();
        assert!((big - (1000.0 + 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn empty_inputs_are_rejected() {
        assert!(matches!(log_sum_exp::<f64>(&[]), Err(VpoError::InvalidArgument(_))));
        assert!(matches!(softmax::<f64>(&[]), Err(VpoError::InvalidArgument(_))));
        assert!(matches!(
            softmax(&[0.0, f64::NAN]),
            Err(VpoError::NonFinite { index: 1, .. })
        ));
    }

    #[test]
    fn softmax_examples() {
        let u = softmax(&[0.0_f64; 3]).unwrap();
        for p in u.iter() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = softmax(&[2f64.ln(), 0.0]).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_examples() {
        assert_eq!(sigmoid(0.0_f64), 0.5);
        // 1 / (1 + e^{-1}) to 15 digits.
        assert!((sigmoid(1.0_f64) - 0.731_058_578_630_004_9).abs() < 1e-15);
        let s = sigmoid(1000.0_f64);
        assert!(s < 1.0 && s > 0.0);
        assert!(sigmoid(-1000.0_f64) > 0.0);
    }

    #[test]
    fn log_sigmoid_matches_direct_evaluation() {
        for z in [-30.0_f64, -2.0, 0.0, 0.5, 4.0, 30.0] {
            let direct = (1.0 / (1.0 + (-z).exp())).ln();
            assert!((log_sigmoid(z) - direct).abs() < 1e-14, "z = {z}");
        }
        assert!(log_sigmoid(-800.0_f64).is_finite());
        // -log σ(log 4) = log(5/4)
        assert!((-log_sigmoid(4f64.ln()) - 1.25f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn hellinger_examples() {
        assert_eq!(bernoulli_hellinger_sq(0.5_f64, 0.5).value, 0.0);
        let h = bernoulli_hellinger_sq(0.9_f64, 0.1);
        let direct = (0.9f64.sqrt() - 0.1f64.sqrt()).powi(2);
        assert!((h.value - direct).abs() < 1e-15);
        assert!(!h.clamped);
        let c = bernoulli_hellinger_sq(0.0_f64, 1.0);
        assert!(c.clamped);
        assert!(c.value <= 1.0 && c.value > 0.99);
    }

    #[test]
    fn kl_examples_and_support() {
        let kl = kl_divergence(&[0.9_f64, 0.1], &[0.5, 0.5]).unwrap();
        let expected = 0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln();
        assert!((kl - expected).abs() < 1e-15);
        assert!(matches!(
            kl_divergence(&[0.5_f64, 0.5], &[1.0, 0.0]),
            Err(VpoError::Domain(_))
        ));
        assert_eq!(kl_divergence(&[1.0_f64, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn probvec_validation() {
        assert!(ProbVec::new(vec![0.5_f64, 0.5]).is_ok());
        assert!(ProbVec::new(vec![0.6_f64, 0.5]).is_err());
        assert!(ProbVec::new(vec![1.2_f64, -0.2]).is_err());
        assert!(ProbVec::<f64>::new(vec![]).is_err());
    }

    #[test]
    fn f32_instantiation() {
        let p = softmax(&[2f32.ln(), 0.0]).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-6);
        assert!((sigmoid(1.0_f32) - 0.731_058_6).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn softmax_is_shift_invariant(
            v in prop::collection::vec(-50.0_f64..50.0, 1..12),
            c in -100.0_f64..100.0,
        ) {
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let a = softmax(&v).unwrap();
            let b = softmax(&shifted).unwrap();
            for (x, y) in a.iter().zip(b.iter()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            let total: f64 = a.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }

        #[test]
        fn lse_shifts_by_constant(
            v in prop::collection::vec(-50.0_f64..50.0, 1..12),
            c in -100.0_f64..100.0,
        ) {
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let diff = log_sum_exp(&shifted).unwrap() - log_sum_exp(&v).unwrap() - c;
            prop_assert!(diff.abs() < 1e-10);
        }

        #[test]
        fn sigmoid_range_and_complement(z in -1.0e6_f64..1.0e6) {
            let s = sigmoid(z);
            prop_assert!(s > 0.0 && s < 1.0);
            prop_assert!((s + sigmoid(-z) - 1.0).abs() < 1e-15);
        }

        #[test]
        fn hellinger_bounds(p in 1e-9_f64..1.0, q in 1e-9_f64..1.0) {
            let h = bernoulli_hellinger_sq(p, q).value;
            prop_assert!((0.0..=1.0).contains(&h));
            prop_assert!((h - bernoulli_hellinger_sq(q, p).value).abs() < 1e-15);
            if h == 0.0 {
                prop_assert!((p - q).abs() < 1e-15);
            }
        }
    }
}
