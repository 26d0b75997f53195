use crate::environments::PreferenceDataset;
use crate::error::{invalid, Result};
use crate::losses::{nll_term, Calibration, RegContexts, Sign, VpoConfig, VpoObjective};
use crate::numerics::{bernoulli_hellinger_sq, dot, sigmoid, sup_norm, Scalar, SeededRng};
use crate::policy_value::{calibrate_reward, ContextBatch, Policy, PolicyKind, RewardModel};

/// Offline VPO solved to stationarity on a tabular bandit.
#[derive(Debug, Clone)]
pub struct ConvergedOffline<T> {
    pub pi_hat: Policy<T>,
    /// The calibrated reward implied by `pi_hat`.
    pub r_hat: RewardModel<T>,
    pub grad_norm: T,
    pub iterations: usize,
    pub objective: T,
}

/// Damped Newton on the offline objective with `π_cal = π_ref`, starting at
/// `π_ref`, until the sup-norm of the gradient drops below `tol`.
///
/// The Hessian comes from central differences of the analytic gradient.
/// Both loss terms are invariant to adding a constant to every logit, so
/// the all-ones direction is pinned before solving.
pub fn converge_offline_tabular<T: Scalar>(
    data: &PreferenceDataset<T>,
    pi_ref: &Policy<T>,
    alpha: T,
    beta: T,
    tol: T,
    max_iter: usize,
) -> Result<ConvergedOffline<T>> {
    if pi_ref.kind() != PolicyKind::TabularSoftmax {
        return Err(invalid("the converged solver is tabular only"));
    }
    if !(alpha > T::zero()) {
        return Err(invalid("alpha must be > 0 for a unique offline solution"));
    }
    let cfg = VpoConfig::new(alpha, beta, Sign::Offline)?;
    let batch = ContextBatch::singleton_empty();
    let mut objective = VpoObjective::new(pi_ref, Calibration::Reference, cfg, RegContexts::Batch(batch.clone()))?;
    objective.extend(data)?;

    let k = pi_ref.theta().len();
    let h = T::of(1e-5);
    let mut theta = pi_ref.theta().to_vec();
    let mut report = objective.evaluate(&theta)?;
    let mut iterations = 0;
    while sup_norm(&report.gradient) >= tol && iterations < max_iter {
        iterations += 1;
        let g = &report.gradient;
        let mut hess = vec![vec![T::zero(); k]; k];
        for j in 0..k {
            let mut up = theta.clone();
            let mut down = theta.clone();
            up[j] = up[j] + h;
            down[j] = down[j] - h;
            let gu = objective.evaluate(&up)?.gradient;
            let gd = objective.evaluate(&down)?.gradient;
            for i in 0..k {
                hess[i][j] = (gu[i] - gd[i]) / (h + h);
            }
        }
        for i in 0..k {
            for j in 0..k {
                hess[i][j] = T::of(0.5) * (hess[i][j] + hess[j][i]) + T::one();
            }
        }
        let neg_g: Vec<T> = g.iter().map(|&v| -v).collect();
        let mut dir = solve(hess, neg_g).unwrap_or_else(|| g.iter().map(|&v| -v).collect());
        let mut slope = dot(&dir, g);
        if !(slope < T::zero()) {
            dir = g.iter().map(|&v| -v).collect();
            slope = dot(&dir, g);
        }
        let mut step = T::one();
        let accepted = loop {
            let trial: Vec<T> = theta.iter().zip(&dir).map(|(&t, &d)| t + step * d).collect();
            let trial_report = objective.evaluate(&trial)?;
            // Near the optimum the objective changes by less than its rounding
            // error, so a strictly smaller gradient also counts as progress.
            let armijo = trial_report.total <= report.total + T::of(1e-4) * step * slope;
            if armijo || sup_norm(&trial_report.gradient) < sup_norm(g) {
                break Some((trial, trial_report));
            }
            step = step * T::of(0.5);
            if step < T::of(1e-14) {
                break None;
            }
        };
        match accepted {
            Some((t, r)) => {
                theta = t;
                report = r;
            }
            // No further decrease is representable; stationarity is as good as it gets.
            None => break,
        }
    }

    let pi_hat = pi_ref.with_theta(theta)?;
    let implied: Vec<T> = pi_hat
        .log_probs(&[])?
        .iter()
        .zip(pi_ref.log_probs(&[])?)
        .map(|(&a, b)| beta * (a - b))
        .collect();
    let r_hat = calibrate_reward(&RewardModel::tabular(implied), pi_ref, &batch)?.reward;
    Ok(ConvergedOffline {
        pi_hat,
        r_hat,
        grad_norm: sup_norm(&report.gradient),
        iterations,
        objective: report.total,
    })
}

/// Gaussian elimination with partial pivoting; `None` when singular.
fn solve<T: Scalar>(mut a: Vec<Vec<T>>, mut b: Vec<T>) -> Option<Vec<T>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).expect("finite"))?;
        if a[pivot][col].abs() < T::of(1e-300) {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for c in col..n {
                a[row][c] = a[row][c] - f * a[col][c];
            }
            b[row] = b[row] - f * b[col];
        }
    }
    let mut x = vec![T::zero(); n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for c in row + 1..n {
            acc = acc - a[row][c] * x[c];
        }
        x[row] = acc / a[row][row];
    }
    Some(x)
}

/// `ℓ(r, D) + α J(r, π)` with `ℓ` the Bradley–Terry negative log-likelihood
/// of the rewards themselves.
pub fn saddle_objective<T: Scalar>(
    r: &RewardModel<T>,
    pi: &Policy<T>,
    pi_ref: &Policy<T>,
    data: &PreferenceDataset<T>,
    alpha: T,
    beta: T,
    batch: &ContextBatch<T>,
) -> Result<T> {
    let mut nll = T::zero();
    for s in data.iter() {
        let rw = r.rewards(&s.context)?;
        if s.preferred >= rw.len() || s.unpreferred >= rw.len() {
            return Err(invalid("sample arm out of range for the reward"));
        }
        nll = nll + nll_term(rw[s.preferred] - rw[s.unpreferred]);
    }
    Ok(nll + alpha * crate::policy_value::value_j(r, pi, pi_ref, beta, batch)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaddleReport<T> {
    pub trials: usize,
    pub objective: T,
    pub tolerance: T,
    /// Trials with `L(r̂, π̂) > L(r′, π̂) + tol`.
    pub reward_violations: usize,
    /// Trials with `L(r̂, π̂) < L(r̂, π′) − tol`.
    pub policy_violations: usize,
    /// Largest `L(r̂, π̂) − L(r′, π̂)`.
    pub worst_reward_excess: T,
    /// Largest `L(r̂, π′) − L(r̂, π̂)`.
    pub worst_policy_excess: T,
}

impl<T: Scalar> SaddleReport<T> {
    pub fn holds(&self) -> bool {
        self.reward_violations == 0 && self.policy_violations == 0
    }
}

/// Probes both saddle inequalities at `(r̂, π̂)` on a tabular bandit with
/// `π_cal = π_ref`.
///
/// Reward perturbations stay in the calibrated class (`Σ π_ref δ = 0`),
/// which is where `r̂` minimizes; a constant shift would otherwise move
/// `J` freely. Policy perturbations act on the logits of `π̂`. Each trial
/// draws a perturbation with entries uniform in `±u·magnitude`, `u ∼ U[0,1]`.
#[allow(clippy::too_many_arguments)]
pub fn check_saddle_point<T: Scalar>(
    r_hat: &RewardModel<T>,
    pi_hat: &Policy<T>,
    pi_ref: &Policy<T>,
    data: &PreferenceDataset<T>,
    alpha: T,
    beta: T,
    rng: &mut SeededRng,
    trials: usize,
    magnitude: T,
) -> Result<SaddleReport<T>> {
    if pi_hat.kind() != PolicyKind::TabularSoftmax || pi_ref.kind() != PolicyKind::TabularSoftmax {
        return Err(invalid("the saddle check is tabular only"));
    }
    let batch = ContextBatch::singleton_empty();
    let k = pi_hat.theta().len();
    let table = r_hat.rewards(&[])?;
    let ref_probs = pi_ref.probs(&[])?;
    let objective = |r: &RewardModel<T>, pi: &Policy<T>| saddle_objective(r, pi, pi_ref, data, alpha, beta, &batch);
    let base = objective(r_hat, pi_hat)?;
    let tolerance = T::of(1e-4) * (T::one() + base.abs());

    let mut report = SaddleReport {
        trials,
        objective: base,
        tolerance,
        reward_violations: 0,
        policy_violations: 0,
        worst_reward_excess: T::neg_infinity(),
        worst_policy_excess: T::neg_infinity(),
    };
    let perturbation = |rng: &mut SeededRng| {
        let scale = magnitude * rng.uniform::<T>();
        (0..k)
            .map(|_| scale * (T::of(2.0) * rng.uniform::<T>() - T::one()))
            .collect::<Vec<T>>()
    };
    for _ in 0..trials {
        let mut delta = perturbation(rng);
        let shift = dot(&ref_probs, &delta);
        delta.iter_mut().for_each(|d| *d = *d - shift);
        let r_prime = RewardModel::tabular(table.iter().zip(&delta).map(|(&a, &b)| a + b).collect());
        let excess = base - objective(&r_prime, pi_hat)?;
        report.worst_reward_excess = report.worst_reward_excess.max(excess);
        if excess > tolerance {
            report.reward_violations += 1;
        }

        let delta = perturbation(rng);
        let pi_prime = pi_hat.with_theta(pi_hat.theta().iter().zip(&delta).map(|(&a, &b)| a + b).collect())?;
        let excess = objective(r_hat, &pi_prime)? - base;
        report.worst_policy_excess = report.worst_policy_excess.max(excess);
        if excess > tolerance {
            report.policy_violations += 1;
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HellingerReport<T> {
    pub trials: usize,
    pub violations: usize,
    /// Largest `δ² − bound`.
    pub worst_excess: T,
    /// Largest `δ² / bound` over trials with a positive bound.
    pub max_ratio: T,
}

/// Monte Carlo check of `δ² ≤ 2(3 + e^{2C})² D_H²(P_{r₁} ‖ P_{r₂}) + 1e-12`
/// for rewards bounded by `C` at a single prompt.
///
/// Trials mix three regimes: independent uniform rewards, rewards at the
/// corners `±C`, and `r₂` a small perturbation of `r₁`.
pub fn check_hellinger_bound<T: Scalar>(rng: &mut SeededRng, trials: usize, c: T) -> Result<HellingerReport<T>> {
    if !(c >= T::zero()) || !c.is_finite() {
        return Err(invalid(format!("C must be >= 0, got {c}")));
    }
    let constant = T::of(2.0) * (T::of(3.0) + (c + c).exp()).powi(2);
    let slack = T::of(1e-12);
    let mut report = HellingerReport {
        trials,
        violations: 0,
        worst_excess: T::neg_infinity(),
        max_ratio: T::zero(),
    };
    for trial in 0..trials {
        let k = 2 + (rng.next_u64() % 9) as usize;
        let uniform = |rng: &mut SeededRng| c * (T::of(2.0) * rng.uniform::<T>() - T::one());
        let (r1, r2): (Vec<T>, Vec<T>) = match trial % 3 {
            0 => (0..k).map(|_| (uniform(rng), uniform(rng))).unzip(),
            1 => (0..k)
                .map(|_| {
                    let a = if rng.bernoulli(T::of(0.5)) { c } else { -c };
                    let b = if rng.bernoulli(T::of(0.5)) { c } else { -c };
                    (a, b)
                })
                .unzip(),
            _ => {
                let eps = T::of(10f64.powf(-8.0 * rng.uniform::<f64>()));
                (0..k)
                    .map(|_| {
                        let a = uniform(rng);
                        let b = (a + eps * uniform(rng)).max(-c).min(c);
                        (a, b)
                    })
                    .unzip()
            }
        };
        let y1 = (rng.next_u64() % k as u64) as usize;
        let y2 = (rng.next_u64() % k as u64) as usize;
        let m1 = r1[y1] - r1[y2];
        let m2 = r2[y1] - r2[y2];
        let delta = m1 - m2;
        let dh = bernoulli_hellinger_sq(sigmoid(m1), sigmoid(m2)).value;
        let lhs = delta * delta;
        let bound = constant * dh;
        let excess = lhs - bound;
        report.worst_excess = report.worst_excess.max(excess);
        if bound > T::zero() {
            report.max_ratio = report.max_ratio.max(lhs / bound);
        }
        if lhs > bound + slack {
            report.violations += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algorithms::{build_run, generate_offline_dataset, EnvSpec};
    use crate::policy_value::optimal_policy;

    fn instance(arms: usize, n: usize, seed: u64) -> (Policy<f64>, PreferenceDataset<f64>) {
        let setup = build_run::<f64>(&EnvSpec::mab(arms), seed).unwrap();
        let data = generate_offline_dataset(&setup.env, &setup.reference, n, seed).unwrap();
        (setup.reference, data)
    }

    #[test]
    fn solver_reaches_stationarity() {
        for arms in 2..=5 {
            let (reference, data) = instance(arms, 30, arms as u64);
            let sol = converge_offline_tabular(&data, &reference, 0.5, 1.0, 1e-10, 200).unwrap();
            assert!(sol.grad_norm < 1e-10, "grad {} after {}", sol.grad_norm, sol.iterations);
            let cal: f64 = dot(&reference.probs(&[]).unwrap(), &sol.r_hat.rewards(&[]).unwrap());
            assert!(cal.abs() < 1e-12);
        }
        let (reference, data) = instance(3, 5, 0);
        assert!(converge_offline_tabular(&data, &reference, 0.0, 1.0, 1e-10, 10).is_err());
    }

    #[test]
    fn saddle_holds_and_degenerates_at_zero_magnitude() {
        let (reference, data) = instance(2, 20, 9);
        let sol = converge_offline_tabular(&data, &reference, 1.0, 1.0, 1e-10, 200).unwrap();
        let mut rng = SeededRng::new(0, 6);
        let rep = check_saddle_point(&sol.r_hat, &sol.pi_hat, &reference, &data, 1.0, 1.0, &mut rng, 200, 0.1).unwrap();
        assert!(rep.holds(), "{rep:?}");
        let zero = check_saddle_point(&sol.r_hat, &sol.pi_hat, &reference, &data, 1.0, 1.0, &mut rng, 5, 0.0).unwrap();
        assert_eq!(zero.worst_reward_excess, 0.0);
        assert_eq!(zero.worst_policy_excess, 0.0);

        // π̂ is the closed-form policy of r̂.
        let closed = optimal_policy(&sol.r_hat, &reference, 1.0, &[]).unwrap();
        let pi_star = Policy::tabular(closed.iter().map(|p| p.ln()).collect()).unwrap();
        let batch = ContextBatch::singleton_empty();
        let a = saddle_objective(&sol.r_hat, &pi_star, &reference, &data, 1.0, 1.0, &batch).unwrap();
        assert!((a - rep.objective).abs() <= rep.tolerance);
    }

    #[test]
    fn unconverged_point_is_detected() {
        let (reference, data) = instance(3, 40, 4);
        let r = RewardModel::tabular(vec![0.0; 3]);
        let mut rng = SeededRng::new(1, 6);
        // The reference with a flat reward is not the VPO solution for informative data.
        let rep = check_saddle_point(&r, &reference, &reference, &data, 0.1, 1.0, &mut rng, 500, 1.0).unwrap();
        assert!(rep.reward_violations > 0);
    }

    #[test]
    fn hellinger_trivial_cases_and_sweep() {
        let mut rng = SeededRng::new(2, 6);
        let zero = check_hellinger_bound::<f64>(&mut rng, 300, 0.0).unwrap();
        assert_eq!(zero.violations, 0);
        assert_eq!(zero.worst_excess, 0.0);
        let rep = check_hellinger_bound::<f64>(&mut rng, 20_000, 1.0).unwrap();
        assert_eq!(rep.violations, 0);
        assert!(rep.max_ratio < 1.0);
        assert!(check_hellinger_bound::<f64>(&mut rng, 1, -1.0).is_err());
    }
}
