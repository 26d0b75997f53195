use std::sync::Arc;
use std::time::Instant;

use super::setup::{eval_batch, CalibrationSource, RegContextSource};
use super::trace::{MetricKind, MetricsTrace, RunFailure, TraceRecord};
use crate::environments::{Environment, PreferenceDataset};
use crate::error::{invalid, Result};
use crate::losses::{Sign, VpoConfig, VpoObjective};
use crate::numerics::{Scalar, SeededRng, Stream};
use crate::optimizer::{adamw_step, AdamWConfig, AdamWState};
use crate::policy_value::{value_j, value_jstar, ContextBatch, Policy};

#[derive(Debug, Clone)]
pub struct OfflineRunConfig<T> {
    pub env: Arc<Environment<T>>,
    pub reference: Policy<T>,
    /// Behaviour policy `π_b` that generates the answers.
    pub behavior: Policy<T>,
    pub dataset_size: usize,
    pub total_steps: usize,
    pub vpo: VpoConfig<T>,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    pub eval_batch_size: usize,
    pub calibration: CalibrationSource,
    pub reg_context_source: RegContextSource,
}

impl<T: Scalar> OfflineRunConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if self.dataset_size == 0 || self.total_steps == 0 {
            return Err(invalid("dataset_size and total_steps must be >= 1"));
        }
        if self.vpo.sign != Sign::Offline {
            return Err(invalid("offline runs use the pessimistic sign"));
        }
        if self.env.is_contextual() && self.eval_batch_size == 0 {
            return Err(invalid("eval_batch_size must be >= 1"));
        }
        self.vpo.validate()?;
        self.optimizer.validate()
    }
}

/// `n` comparisons with `x ∼ ρ`, `y₁, y₂ ∼ π_b(·|x)` and oracle labels.
pub fn generate_offline_dataset<T: Scalar>(
    env: &Environment<T>,
    behavior: &Policy<T>,
    n: usize,
    seed: u64,
) -> Result<PreferenceDataset<T>> {
    let mut contexts = SeededRng::for_stream(seed, Stream::Contexts);
    let mut answers = SeededRng::for_stream(seed, Stream::Answers);
    let mut labels = SeededRng::for_stream(seed, Stream::Labels);
    let mut data = PreferenceDataset::new();
    for _ in 0..n {
        let x = env.sample_context(&mut contexts);
        let probs = behavior.probs(&x)?;
        let y1 = answers.categorical(&probs);
        let y2 = answers.categorical(&probs);
        data.push(env.label_pair(&x, y1, y2, &mut labels)?);
    }
    Ok(data)
}

struct Fit<T> {
    gap: T,
    first_loss: T,
    final_loss: T,
}

fn fit<T: Scalar>(
    cfg: &OfflineRunConfig<T>,
    data: &PreferenceDataset<T>,
    eval: &ContextBatch<T>,
    jstar: T,
) -> Result<Fit<T>> {
    let mut objective = VpoObjective::new(
        &cfg.reference,
        cfg.calibration.to_calibration(),
        cfg.vpo,
        cfg.reg_context_source.to_reg_contexts(eval),
    )?;
    objective.extend(data)?;
    let mut theta = cfg.reference.theta().to_vec();
    let mut state = AdamWState::new(theta.len());
    let mut first_loss = None;
    for _ in 0..cfg.total_steps {
        let (total, gradient) = objective.loss_and_gradient(&theta)?;
        first_loss.get_or_insert(total);
        adamw_step(&mut theta, &gradient, &mut state, &cfg.optimizer)?;
    }
    let final_loss = objective.loss_and_gradient(&theta)?.0;
    let pi_hat = cfg.reference.with_theta(theta)?;
    let r_star = cfg.env.true_reward_model();
    let gap = jstar - value_j(&r_star, &pi_hat, &cfg.reference, cfg.vpo.beta, eval)?;
    Ok(Fit {
        gap,
        first_loss: first_loss.expect("total_steps >= 1"),
        final_loss,
    })
}

/// Offline VPO on a fresh dataset of `cfg.dataset_size` comparisons.
pub fn run_offline<T: Scalar>(cfg: &OfflineRunConfig<T>) -> Result<MetricsTrace<T>> {
    run_offline_sweep(cfg, &[cfg.dataset_size])
}

/// Offline VPO at each size in `sizes`, trained on nested prefixes of one
/// dataset of the largest size. `cfg.dataset_size` is ignored.
pub fn run_offline_sweep<T: Scalar>(cfg: &OfflineRunConfig<T>, sizes: &[usize]) -> Result<MetricsTrace<T>> {
    let max = sizes.iter().copied().max().ok_or_else(|| invalid("empty dataset size grid"))?;
    OfflineRunConfig {
        dataset_size: max,
        ..cfg.clone()
    }
    .validate()?;
    if sizes.contains(&0) {
        return Err(invalid("dataset sizes must be >= 1"));
    }
    let start = Instant::now();
    let eval = eval_batch(cfg.env.as_ref(), cfg.eval_batch_size, cfg.seed)?;
    let jstar = value_jstar(&cfg.env.true_reward_model(), &cfg.reference, cfg.vpo.beta, &eval)?;
    let data = generate_offline_dataset(cfg.env.as_ref(), &cfg.behavior, max, cfg.seed)?;

    let mut trace = MetricsTrace::new(MetricKind::SuboptimalityGap);
    for &n in sizes {
        match fit(cfg, &data.prefix(n), &eval, jstar) {
            Ok(f) => trace.records.push(TraceRecord {
                x: n as u64,
                metric: f.gap,
                instantaneous: None,
                loss: f.final_loss,
                first_loss: Some(f.first_loss),
            }),
            Err(e) => {
                log::warn!("offline run (seed {}) failed at N = {n}: {e}", cfg.seed);
                trace.failure = Some(RunFailure {
                    at: n as u64,
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
    use crate::algorithms::{build_run, EnvSpec};

    fn cfg(alpha: f64, n: usize, seed: u64) -> OfflineRunConfig<f64> {
        let setup = build_run(&EnvSpec::mab(10), seed).unwrap();
        OfflineRunConfig {
            env: setup.env,
            behavior: setup.reference.clone(),
            reference: setup.reference,
            dataset_size: n,
            total_steps: 300,
            vpo: VpoConfig::new(alpha, 1.0, Sign::Offline).unwrap(),
            optimizer: AdamWConfig::default(),
            seed,
            eval_batch_size: 64,
            calibration: CalibrationSource::Reference,
            reg_context_source: RegContextSource::DatasetContexts,
        }
    }

    #[test]
    fn dataset_is_seeded_and_prefix_stable() {
        let c = cfg(0.0, 50, 3);
        let a = generate_offline_dataset(&c.env, &c.behavior, 50, 3).unwrap();
        let b = generate_offline_dataset(&c.env, &c.behavior, 20, 3).unwrap();
        assert_eq!(a.len(), 50);
        assert_eq!(a.prefix(20), b);
    }

    #[test]
    fn gap_is_nonnegative_and_loss_decreases() {
        for seed in 0..3 {
            let trace = run_offline_sweep(&cfg(0.5, 0, seed), &[10, 100]).unwrap();
            assert_eq!(trace.records.len(), 2);
            for r in &trace.records {
                assert!(r.metric >= -1e-9);
                assert!(r.loss <= r.first_loss.unwrap() + 1e-9);
            }
        }
    }

    #[test]
    fn single_run_matches_sweep_entry() {
        let single = run_offline(&cfg(0.1, 40, 5)).unwrap();
        let sweep = run_offline_sweep(&cfg(0.1, 0, 5), &[10, 40]).unwrap();
        assert_eq!(single.records[0], sweep.records[1]);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(run_offline(&cfg(0.1, 0, 0)).is_err());
        let mut c = cfg(0.1, 10, 0);
        c.vpo.sign = Sign::Online;
        assert!(run_offline(&c).is_err());
        assert!(run_offline_sweep(&cfg(0.1, 10, 0), &[]).is_err());
    }
}
