//! Value-incentivized preference optimization on synthetic bandits.
//!
//! The core is generic over the scalar type ([`numerics::Scalar`], implemented
//! for `f32` and `f64`). Concrete `f64` aliases live at the crate root.

pub mod error;
pub mod numerics;
pub mod environments;
pub mod policy_value;
pub mod losses;
pub mod optimizer;
pub mod algorithms;
pub mod token_mdp;
pub mod experiment_io;

pub use error::{Result, VpoError};
pub use numerics::{ProbVec as GenericProbVec, Scalar, SeededRng, Stream};
pub use optimizer::{adamw_step, AdamWConfig};

pub type ProbVec = numerics::ProbVec<f64>;
pub type FeatureMap = environments::FeatureMap<f64>;
pub type Environment = environments::Environment<f64>;
pub type PreferenceSample = environments::PreferenceSample<f64>;
pub type PreferenceDataset = environments::PreferenceDataset<f64>;
pub type Policy = policy_value::Policy<f64>;
pub type RewardModel = policy_value::RewardModel<f64>;
pub type ContextBatch = policy_value::ContextBatch<f64>;
pub type VpoConfig = losses::VpoConfig<f64>;
pub type LossReport = losses::LossReport<f64>;
pub type VpoObjective = losses::VpoObjective<f64>;
pub type AdamWState = optimizer::AdamWState<f64>;

pub type Policy32 = policy_value::Policy<f32>;
pub type Environment32 = environments::Environment<f32>;
