//! Randomized verification suites behind the `gradcheck` and `verify`
//! commands. Each suite is deterministic given its seed.

use std::sync::Arc;

use crate::algorithms::{
    build_run, check_hellinger_bound, check_saddle_point, converge_offline_tabular, generate_offline_dataset, EnvSpec,
};
use crate::environments::{make_contextual_env, PreferenceDataset, PreferenceSample};
use crate::error::Result;
use crate::losses::{grad_vpo, vpo_loss, Calibration, Sign, VpoConfig};
use crate::numerics::{finite_diff_grad, relative_sup_error, SeededRng, DEFAULT_FD_STEP};
use crate::policy_value::{
    calibrate_reward, value_j, value_jstar, ConditionalDist, ContextBatch, Policy, RewardModel, TiltedPolicy,
};
use crate::token_mdp::{
    soft_backward_induction, telescoping_check, trajectory_logsumexp_oracle, TokenMdp, TreeShape,
};

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for SuiteResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{status} {}: {}", self.name, self.detail)
    }
}

pub const GRADCHECK_TOLERANCE: f64 = 1e-5;
pub const SADDLE_REL_TOLERANCE: f64 = 1e-4;
pub const TOKEN_ORACLE_TOLERANCE: f64 = 1e-10;
pub const TELESCOPING_TOLERANCE: f64 = 1e-8;
pub const DUAL_JSTAR_TOLERANCE: f64 = 1e-10;

fn uniform_vec(rng: &mut SeededRng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| lo + (hi - lo) * rng.uniform::<f64>()).collect()
}

fn below(rng: &mut SeededRng, n: usize) -> usize {
    (rng.next_u64() % n as u64) as usize
}

/// One randomized loss instance.
struct LossInstance {
    pi: Policy<f64>,
    reference: Policy<f64>,
    calibration: Calibration<f64>,
    data: PreferenceDataset<f64>,
    batch: ContextBatch<f64>,
}

fn loss_instance(rng: &mut SeededRng, log_linear: bool, calibration: usize) -> Result<LossInstance> {
    let n = 1 + below(rng, 20);
    let (reference, pi, data, batch) = if log_linear {
        let k = 2 + below(rng, 7);
        let d = 2 + below(rng, 5);
        let env = make_contextual_env::<f64>(2, k, d, rng)?;
        let fm = Arc::clone(env.feature_map().expect("contextual"));
        let batch = ContextBatch::for_env(&env, 8, rng)?;
        let data = (0..n)
            .map(|_| PreferenceSample {
                context: env.sample_context(rng),
                preferred: below(rng, k),
                unpreferred: below(rng, k),
            })
            .collect();
        let reference = Policy::log_linear(uniform_vec(rng, d, 0.0, 1.0), Arc::clone(&fm))?;
        let pi = reference.with_theta(uniform_vec(rng, d, -1.0, 1.0))?;
        (reference, pi, data, batch)
    } else {
        let k = 2 + below(rng, 9);
        let data = (0..n)
            .map(|_| PreferenceSample {
                context: vec![],
                preferred: below(rng, k),
                unpreferred: below(rng, k),
            })
            .collect();
        let reference = Policy::tabular(uniform_vec(rng, k, 0.0, 1.0))?;
        let pi = reference.with_theta(uniform_vec(rng, k, -2.0, 2.0))?;
        (reference, pi, data, ContextBatch::singleton_empty())
    };
    let calibration = match calibration {
        0 => Calibration::Reference,
        1 => Calibration::Policy(reference.with_theta(uniform_vec(rng, reference.theta().len(), -1.0, 1.0))?),
        _ => Calibration::EmpiricalPositive,
    };
    Ok(LossInstance {
        pi,
        reference,
        calibration,
        data: PreferenceDataset::from_samples(data),
        batch,
    })
}

/// Analytic VPO gradient against central differences on `instances`
/// randomized problems cycling through both policy kinds, both signs,
/// `α ∈ {0, 0.1, 1}` and `β ∈ {1, 5}`.
pub fn gradcheck_suite(seed: u64, instances: usize) -> Result<SuiteResult> {
    let mut rng = SeededRng::new(seed, 101);
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let log_linear = i % 2 == 1;
        let sign = if (i / 2) % 2 == 0 { Sign::Online } else { Sign::Offline };
        let alpha = [0.0, 0.1, 1.0][(i / 4) % 3];
        let beta = [1.0, 5.0][(i / 12) % 2];
        let inst = loss_instance(&mut rng, log_linear, (i / 24) % 3)?;
        let cfg = VpoConfig::new(alpha, beta, sign)?;
        let analytic = grad_vpo(&inst.pi, &inst.reference, &inst.calibration, &cfg, &inst.data, &inst.batch)?;
        let loss = |t: &[f64]| {
            let pi = inst.pi.with_theta(t.to_vec()).expect("same length");
            vpo_loss(&pi, &inst.reference, &inst.calibration, &cfg, &inst.data, &inst.batch)
                .expect("valid instance")
                .total
        };
        let fd = finite_diff_grad(loss, inst.pi.theta(), DEFAULT_FD_STEP)?;
        worst = worst.max(relative_sup_error(&analytic, &fd));
    }
    Ok(SuiteResult {
        name: "gradient",
        passed: worst < GRADCHECK_TOLERANCE,
        detail: format!("{instances} instances, worst relative sup error {worst:.3e} (tol {GRADCHECK_TOLERANCE:.0e})"),
    })
}

/// Converged offline solutions on 2–5 arm bandits, each probed with
/// `trials` random perturbations of magnitude 0.1.
pub fn saddle_suite(seed: u64, instances: usize, trials: usize) -> Result<SuiteResult> {
    let mut rng = SeededRng::new(seed, 102);
    let mut violations = 0;
    let mut worst_grad: f64 = 0.0;
    let mut worst_excess = f64::NEG_INFINITY;
    for i in 0..instances {
        let arms = 2 + i % 4;
        let run_seed = seed.wrapping_mul(1000).wrapping_add(i as u64);
        let setup = build_run::<f64>(&EnvSpec::mab(arms), run_seed)?;
        let n = 20 + below(&mut rng, 31);
        let data = generate_offline_dataset(&setup.env, &setup.reference, n, run_seed)?;
        let alpha = [0.5, 1.0][i % 2];
        let sol = converge_offline_tabular(&data, &setup.reference, alpha, 1.0, 1e-10, 200)?;
        worst_grad = worst_grad.max(sol.grad_norm);
        let rep = check_saddle_point(
            &sol.r_hat,
            &sol.pi_hat,
            &setup.reference,
            &data,
            alpha,
            1.0,
            &mut rng,
            trials,
            0.1,
        )?;
        violations += rep.reward_violations + rep.policy_violations;
        worst_excess = worst_excess
            .max((rep.worst_reward_excess - rep.tolerance) / (1.0 + rep.objective.abs()))
            .max((rep.worst_policy_excess - rep.tolerance) / (1.0 + rep.objective.abs()));
    }
    Ok(SuiteResult {
        name: "saddle point",
        passed: violations == 0 && worst_grad < 1e-8,
        detail: format!(
            "{instances} instances x {trials} perturbations, {violations} violations, \
             worst scaled excess over tolerance {worst_excess:.3e}, worst solver gradient {worst_grad:.1e}"
        ),
    })
}

pub fn hellinger_suite(seed: u64, trials: usize, c: f64) -> Result<SuiteResult> {
    let mut rng = SeededRng::new(seed, 103);
    let rep = check_hellinger_bound(&mut rng, trials, c)?;
    Ok(SuiteResult {
        name: "hellinger bound",
        passed: rep.violations == 0,
        detail: format!(
            "{trials} trials at C = {c}, {} violations, max ratio to bound {:.3e}",
            rep.violations, rep.max_ratio
        ),
    })
}

/// Backward induction against the trajectory oracle on `instances` random
/// trees (`A ≤ 3`, `H ≤ 4`), plus the telescoping identity over every
/// trajectory of `A = 2`, `H = 3` trees.
pub fn token_suite(seed: u64, instances: usize) -> Result<SuiteResult> {
    let mut rng = SeededRng::new(seed, 104);
    let mut oracle_gap: f64 = 0.0;
    for i in 0..instances {
        let shape = TreeShape::new(2 + i % 2, 1 + (i / 2) % 4, 1 + below(&mut rng, 3))?;
        let eos = if i % 5 == 4 { Some(below(&mut rng, shape.vocab_size)) } else { None };
        let mdp = TokenMdp::<f64>::random(shape, eos, &mut rng)?;
        let beta = 0.2 + 4.8 * rng.uniform::<f64>();
        let sol = soft_backward_induction(&mdp, beta)?;
        for p in 0..shape.prompts {
            let oracle = trajectory_logsumexp_oracle(&mdp, p, beta)?;
            oracle_gap = oracle_gap.max((sol.root_value(p) - oracle).abs());
        }
    }
    let mut residual: f64 = 0.0;
    let mut checked = 0;
    for i in 0..10 {
        let shape = TreeShape::new(2, 3, 2)?;
        let eos = if i % 2 == 1 { Some(1) } else { None };
        let mdp = TokenMdp::<f64>::random(shape, eos, &mut rng)?;
        let sol = soft_backward_induction(&mdp, 0.5 + i as f64 * 0.5)?;
        for p in 0..shape.prompts {
            let rep = telescoping_check(&mdp, &sol, &mdp.trajectories(p)?)?;
            residual = residual.max(rep.max_residual);
            checked += rep.checked;
        }
    }
    Ok(SuiteResult {
        name: "token identities",
        passed: oracle_gap < TOKEN_ORACLE_TOLERANCE && residual < TELESCOPING_TOLERANCE,
        detail: format!(
            "oracle gap {oracle_gap:.3e} over {instances} trees (tol {TOKEN_ORACLE_TOLERANCE:.0e}), \
             telescoping residual {residual:.3e} over {checked} trajectories (tol {TELESCOPING_TOLERANCE:.0e})"
        ),
    })
}

/// `β E[log Z] = J(r, π_r)` on bandit and contextual instances, and
/// `J*(r) = −β E_{π_ref}[log π_r − log π_ref]` for rewards calibrated under
/// `π_ref` on bandits.
pub fn dual_jstar_suite(seed: u64, instances: usize) -> Result<SuiteResult> {
    let mut rng = SeededRng::new(seed, 105);
    let mut dual_gap: f64 = 0.0;
    let mut calibrated_gap: f64 = 0.0;
    for i in 0..instances {
        let beta = 0.2 + 4.8 * rng.uniform::<f64>();
        if i % 2 == 0 {
            let k = 2 + below(&mut rng, 9);
            let batch = ContextBatch::singleton_empty();
            let reference = Policy::tabular(uniform_vec(&mut rng, k, 0.0, 1.0))?;
            let r = RewardModel::tabular(uniform_vec(&mut rng, k, -1.0, 2.0));
            let jstar = value_jstar(&r, &reference, beta, &batch)?;
            let tilted = TiltedPolicy {
                reward: &r,
                reference: &reference,
                beta,
            };
            dual_gap = dual_gap.max((jstar - value_j(&r, &tilted, &reference, beta, &batch)?).abs());

            let cal = calibrate_reward(&r, &reference, &batch)?.reward;
            let cal_tilted = TiltedPolicy {
                reward: &cal,
                reference: &reference,
                beta,
            };
            let lp = cal_tilted.log_dist(&[])?;
            let lr = reference.log_probs(&[])?;
            let p = reference.probs(&[])?;
            let expected = (0..k).fold(0.0, |acc, y| acc + p[y] * (lp[y] - lr[y]));
            calibrated_gap = calibrated_gap.max((value_jstar(&cal, &reference, beta, &batch)? + beta * expected).abs());
        } else {
            let k = 2 + below(&mut rng, 9);
            let d = 2 + below(&mut rng, 5);
            let env = make_contextual_env::<f64>(2, k, d, &mut rng)?;
            let fm = Arc::clone(env.feature_map().expect("contextual"));
            let batch = ContextBatch::for_env(&env, 16, &mut rng)?;
            let reference = Policy::log_linear(uniform_vec(&mut rng, d, 0.0, 1.0), Arc::clone(&fm))?;
            let r = RewardModel::linear(uniform_vec(&mut rng, d, 0.0, 1.0), fm)?;
            let tilted = TiltedPolicy {
                reward: &r,
                reference: &reference,
                beta,
            };
            let jstar = value_jstar(&r, &reference, beta, &batch)?;
            dual_gap = dual_gap.max((jstar - value_j(&r, &tilted, &reference, beta, &batch)?).abs());
        }
    }
    Ok(SuiteResult {
        name: "dual J*",
        passed: dual_gap < DUAL_JSTAR_TOLERANCE && calibrated_gap < DUAL_JSTAR_TOLERANCE,
        detail: format!(
            "{instances} instances, |βE log Z − J(r, π_r)| {dual_gap:.3e}, calibrated identity gap {calibrated_gap:.3e} \
             (tol {DUAL_JSTAR_TOLERANCE:.0e})"
        ),
    })
}

/// Saddle-point, Hellinger, token-level and dual-J* suites at their
/// standard sizes.
pub fn verify_all(seed: u64) -> Result<Vec<SuiteResult>> {
    Ok(vec![
        saddle_suite(seed, 10, 1000)?,
        hellinger_suite(seed, 100_000, 1.0)?,
        token_suite(seed, 50)?,
        dual_jstar_suite(seed, 200)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suites_pass() {
        assert!(gradcheck_suite(0, 24).unwrap().passed);
        assert!(saddle_suite(0, 2, 50).unwrap().passed);
        assert!(hellinger_suite(0, 2000, 1.0).unwrap().passed);
        assert!(token_suite(0, 8).unwrap().passed);
        assert!(dual_jstar_suite(0, 20).unwrap().passed);
    }

    #[test]
    fn display_format() {
        let r = SuiteResult {
            name: "x",
            passed: false,
            detail: "d".into(),
        };
        assert_eq!(r.to_string(), "FAIL x: d");
    }
}
