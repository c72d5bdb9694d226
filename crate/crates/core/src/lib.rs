//! Policy optimisation for a fed-batch fermentation and chromatography process
//! whose purification dynamics are only known through a Bayesian posterior.
//!
//! The MDP, policy, estimator and oracle layers are generic over the scalar
//! type ([`Real`], implemented for `f32` and `f64`). The bioprocess simulator,
//! the posterior sampler and the training loop work in `f64`; the aliases below
//! name the `f64` instances they use.

pub mod bayes;
pub mod bioenv;
pub mod error;
pub mod estimators;
pub mod harness;
pub mod mdp;
pub mod oracle;
pub mod policy;
pub mod rng;
pub mod scalar;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Real;

pub type StateVec64 = mdp::StateVec<f64>;
pub type Step64 = mdp::Step<f64>;
pub type Trajectory64 = mdp::Trajectory<f64>;
pub type PolicyParams64 = policy::PolicyParams<f64>;
pub type FeatureMap64 = policy::FeatureMap<f64>;
pub type LinearSoftmax64 = policy::LinearSoftmax<f64>;
pub type Mlp64 = policy::Mlp<f64>;
pub type AnyPolicy64 = policy::AnyPolicy<f64>;
pub type Credit64 = estimators::Credit<f64>;
pub type GradientEstimate64 = estimators::GradientEstimate<f64>;
/// Replay buffer of the bioprocess trainer.
pub type BioReplayBuffer = estimators::ReplayBuffer<f64, PolicyParams64, bioenv::ModelParams>;
pub type TabularMDP64 = oracle::TabularMDP<f64>;
pub type TabularModel64 = oracle::TabularModel<f64>;
