//! Distribution-matching fine-tuning of tabular sequence samplers.
//!
//! A tabular n-gram teacher defines priors and likelihoods over token
//! sequences; a delta-adjusted policy is trained with a subtrajectory
//! balance objective to sample terminal sequences proportionally to a
//! task reward, and a brute-force enumeration oracle verifies the match
//! exactly. Core math is generic over the scalar type ([`Scalar`]);
//! f64-backed aliases for the main types live at the crate root.

pub mod autodiff;
pub mod lm;
pub mod objective;
pub mod oracle;
pub mod policy;
pub mod scalar;
pub mod seq;
pub mod tasks;
pub mod training;

pub use scalar::{fp, Scalar};
pub use seq::{
    concat, concat3, EnvDecision, Environment, FreeEnv, SeqError, TokenId, TokenSequence,
    Trajectory, TrajectorySource, VocabRef, Vocabulary,
};

/// f64-backed teacher model.
pub type TabularLm64 = lm::TabularLm<f64>;
/// f64-backed trainable policy.
pub type DeltaPolicy64 = policy::DeltaPolicy<f64>;
/// f64-backed trajectory.
pub type Trajectory64 = Trajectory<f64>;
/// f64-backed reward definition.
pub type RewardSpec64 = tasks::RewardSpec<f64>;
/// f64-backed training configuration.
pub type TrainConfig64 = training::TrainConfig<f64>;
/// f64-backed replay buffer.
pub type ReplayBuffer64 = training::ReplayBuffer<f64>;
/// f64-backed exact terminal distribution.
pub type TerminalDistribution64 = oracle::TerminalDistribution<f64>;
