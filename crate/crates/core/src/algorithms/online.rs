use std::sync::Arc;
use std::time::Instant;

use super::setup::{eval_batch, CalibrationSource, RegContextSource};
use super::trace::{MetricKind, MetricsTrace, RunFailure, TraceRecord};
use crate::environments::Environment;
use crate::error::{invalid, Result};
use crate::losses::{Sign, VpoConfig, VpoObjective};
use crate::numerics::{Scalar, SeededRng, Stream};
use crate::optimizer::{adamw_step, AdamWConfig, AdamWState};
use crate::policy_value::{value_j, value_jstar, Policy};

#[derive(Debug, Clone)]
pub struct OnlineRunConfig<T> {
    pub env: Arc<Environment<T>>,
    pub reference: Policy<T>,
    /// Number of iterations `T`.
    pub iterations: usize,
    /// Answer pairs drawn per iteration `M`.
    pub batch_size: usize,
    /// AdamW steps per iteration.
    pub inner_steps: usize,
    pub vpo: VpoConfig<T>,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    /// Prompts in the frozen evaluation batch (contextual only).
    pub eval_batch_size: usize,
    pub calibration: CalibrationSource,
    pub reg_context_source: RegContextSource,
}

impl<T: Scalar> OnlineRunConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.inner_steps == 0 {
            return Err(invalid("batch_size and inner_steps must be >= 1"));
        }
        if self.vpo.sign != Sign::Online {
            return Err(invalid("online runs use the optimistic sign"));
        }
        if self.env.is_contextual() && self.eval_batch_size == 0 {
            return Err(invalid("eval_batch_size must be >= 1"));
        }
        self.vpo.validate()?;
        self.optimizer.validate()
    }
}

/// Online VPO. Each iteration records the regret of the current policy,
/// collects `M` labelled pairs from it, then takes `inner_steps` AdamW
/// steps on the loss over all data so far, warm-started and with a single
/// optimizer state for the whole run.
///
/// Every iteration consumes the same number of draws from each stream
/// regardless of `α`, so runs that differ only in `α` see paired data
/// randomness.
pub fn run_online<T: Scalar>(cfg: &OnlineRunConfig<T>) -> Result<MetricsTrace<T>> {
    cfg.validate()?;
    let start = Instant::now();
    let env = cfg.env.as_ref();
    let beta = cfg.vpo.beta;
    let eval = eval_batch(env, cfg.eval_batch_size, cfg.seed)?;
    let r_star = env.true_reward_model();
    let jstar = value_jstar(&r_star, &cfg.reference, beta, &eval)?;

    let mut objective = VpoObjective::new(
        &cfg.reference,
        cfg.calibration.to_calibration(),
        cfg.vpo,
        cfg.reg_context_source.to_reg_contexts(&eval),
    )?;
    let mut contexts = SeededRng::for_stream(cfg.seed, Stream::Contexts);
    let mut answers = SeededRng::for_stream(cfg.seed, Stream::Answers);
    let mut labels = SeededRng::for_stream(cfg.seed, Stream::Labels);

    let mut theta = cfg.reference.theta().to_vec();
    let mut state = AdamWState::new(theta.len());
    let mut trace = MetricsTrace::new(MetricKind::CumulativeRegret);
    let mut cumulative = T::zero();
    for t in 0..cfg.iterations {
        let mut step = || -> Result<(T, T)> {
            let pi = cfg.reference.with_theta(theta.clone())?;
            let regret = jstar - value_j(&r_star, &pi, &cfg.reference, beta, &eval)?;
            for _ in 0..cfg.batch_size {
                let x = env.sample_context(&mut contexts);
                let probs = pi.probs(&x)?;
                let y1 = answers.categorical(&probs);
                let y2 = answers.categorical(&probs);
                objective.push(&env.label_pair(&x, y1, y2, &mut labels)?)?;
            }
            let mut loss = T::zero();
            for _ in 0..cfg.inner_steps {
                let (total, gradient) = objective.loss_and_gradient(&theta)?;
                loss = total;
                adamw_step(&mut theta, &gradient, &mut state, &cfg.optimizer)?;
            }
            Ok((regret, loss))
        };
        match step() {
            Ok((regret, loss)) => {
                cumulative = cumulative + regret;
                trace.records.push(TraceRecord {
                    x: t as u64 + 1,
                    metric: cumulative,
                    instantaneous: Some(regret),
                    loss,
                    first_loss: None,
                });
            }
            Err(e) => {
                log::warn!("online run (seed {}) failed at iteration {}: {e}", cfg.seed, t + 1);
                trace.failure = Some(RunFailure {
                    at: t as u64 + 1,
                    message: e.to_string(),
                });
                break;
            }
        }
    }
    trace.wall_time_secs = start.elapsed().as_secs_f64();
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy_value::ContextBatch;
    use crate::algorithms::{build_run, EnvSpec};

    /// Regret of `pi` on the run's evaluation batch.
    fn instantaneous_regret<T: Scalar>(
        env: &Environment<T>,
        pi: &Policy<T>,
        reference: &Policy<T>,
        beta: T,
        eval: &ContextBatch<T>,
    ) -> Result<T> {
        let r_star = env.true_reward_model();
        Ok(value_jstar(&r_star, reference, beta, eval)? - value_j(&r_star, pi, reference, beta, eval)?)
    }

    fn mab_cfg(alpha: f64, iterations: usize, seed: u64) -> OnlineRunConfig<f64> {
        let setup = build_run(&EnvSpec::mab(10), seed).unwrap();
        OnlineRunConfig {
            env: setup.env,
            reference: setup.reference,
            iterations,
            batch_size: 5,
            inner_steps: 20,
            vpo: VpoConfig::new(alpha, 1.0, Sign::Online).unwrap(),
            optimizer: AdamWConfig::default(),
            seed,
            eval_batch_size: 512,
            calibration: CalibrationSource::Reference,
            reg_context_source: RegContextSource::DatasetContexts,
        }
    }

    #[test]
    fn zero_iterations_give_empty_trace() {
        let trace = run_online(&mab_cfg(0.1, 0, 0)).unwrap();
        assert!(trace.records.is_empty());
        assert_eq!(trace.last_metric(), 0.0);
        assert!(trace.is_ok());
    }

    #[test]
    fn regret_is_monotone_and_deterministic() {
        let a = run_online(&mab_cfg(0.1, 40, 1)).unwrap();
        let b = run_online(&mab_cfg(0.1, 40, 1)).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.records.len(), 40);
        for w in a.records.windows(2) {
            assert!(w[1].metric >= w[0].metric - 1e-9);
        }
        assert!(a.records.iter().all(|r| r.instantaneous.unwrap() >= 0.0));
    }

    #[test]
    fn first_iteration_regret_is_reference_regret() {
        let cfg = mab_cfg(0.0, 1, 2);
        let trace = run_online(&cfg).unwrap();
        let eval = ContextBatch::singleton_empty();
        let expected = instantaneous_regret(&cfg.env, &cfg.reference, &cfg.reference, 1.0, &eval).unwrap();
        assert!((trace.records[0].metric - expected).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_config() {
        let mut cfg = mab_cfg(0.1, 1, 0);
        cfg.batch_size = 0;
        assert!(run_online(&cfg).is_err());
        let mut cfg = mab_cfg(0.1, 1, 0);
        cfg.vpo.sign = Sign::Offline;
        assert!(run_online(&cfg).is_err());
    }
}
