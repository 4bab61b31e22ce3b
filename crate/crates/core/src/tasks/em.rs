//! Expectation-maximization over the latent rationale: the E-step samples
//! (or enumerates) posteriors over the middle segment, the M-step refits the
//! teacher on the weighted triples, and the exact data log-likelihood is
//! tracked every round by brute-force marginalization.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::lm::{LmError, TabularLm};
use crate::oracle::{exact_target, marginal_likelihood, OracleError};
use crate::policy::{sample_sequence, DeltaPolicy, PolicyError};
use crate::scalar::Scalar;
use crate::seq::{FreeEnv, TokenId, TokenSequence, TrajectorySource};
use crate::training::{derive_seed, train, ReplayBuffer, TrainConfig, TrainError, TrainItem};

use super::{infill_condition, RewardSpec};

#[derive(Debug, Error)]
pub enum EmError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// EM configuration. With `exact_e_step` the posterior is enumerated and
/// used as fractional weights (classical EM); otherwise the policy is
/// trained amortized against infill rewards and sampled.
#[derive(Debug, Clone)]
pub struct EmConfig<T: Scalar> {
    pub rounds: usize,
    pub exact_e_step: bool,
    /// M-step samples per (x, y) pair in the amortized mode.
    pub samples_per_pair: usize,
    /// E-step training configuration (amortized mode).
    pub train: TrainConfig<T>,
    /// Enumeration bound on the latent segment length.
    pub max_z_len: usize,
    pub cap: usize,
    /// Separator token placed between x and y in the policy condition.
    pub separator: TokenId,
}

/// One round's exact data log-likelihood (round 0 is the initial model).
#[derive(Debug, Clone, PartialEq)]
pub struct EmRound<T> {
    pub round: usize,
    pub data_log_likelihood: T,
}

/// Sum of exact log p(y | x) over the dataset.
pub fn data_log_likelihood<T: Scalar>(
    teacher: &TabularLm<T>,
    dataset: &[(TokenSequence, TokenSequence)],
    max_z_len: usize,
    cap: usize,
) -> Result<T, OracleError> {
    let mut total = T::zero();
    for (x, y) in dataset {
        total = total + marginal_likelihood(teacher, x, y, max_z_len, cap)?;
    }
    Ok(total)
}

/// Runs `rounds` EM rounds and returns the updated teacher, the (amortized)
/// policy, and the per-round exact data log-likelihoods.
#[allow(clippy::type_complexity)]
pub fn em_loop<T: Scalar>(
    mut teacher: Arc<TabularLm<T>>,
    mut policy: DeltaPolicy<T>,
    dataset: &[(TokenSequence, TokenSequence)],
    cfg: &EmConfig<T>,
) -> Result<(Arc<TabularLm<T>>, DeltaPolicy<T>, Vec<EmRound<T>>), EmError> {
    let mut metrics = vec![EmRound {
        round: 0,
        data_log_likelihood: data_log_likelihood(&teacher, dataset, cfg.max_z_len, cfg.cap)?,
    }];
    for round in 1..=cfg.rounds {
        let mut m_samples: Vec<(TokenSequence, TokenSequence, TokenSequence, T)> = Vec::new();
        if cfg.exact_e_step {
            for (x, y) in dataset {
                let spec = RewardSpec::infill(Arc::clone(&teacher), x.clone(), y.clone());
                let posterior =
                    exact_target(&spec, teacher.vocab(), 0, cfg.max_z_len, cfg.cap)?;
                for (ids, weight) in posterior.entries() {
                    m_samples.push((
                        x.clone(),
                        TokenSequence::from_ids(ids.to_vec()),
                        y.clone(),
                        weight,
                    ));
                }
            }
        } else {
            policy = policy.reteach(Arc::clone(&teacher))?;
            let items: Vec<TrainItem<T>> = dataset
                .iter()
                .map(|(x, y)| TrainItem {
                    condition: infill_condition(x, y, cfg.separator),
                    reward: RewardSpec::infill(Arc::clone(&teacher), x.clone(), y.clone()),
                })
                .collect();
            let mut round_cfg = cfg.train.clone();
            round_cfg.seed = derive_seed(cfg.train.seed, 0x656d, round as u64);
            let out = train(
                policy,
                &items,
                &FreeEnv,
                &round_cfg,
                ReplayBuffer::new(round_cfg.buffer_capacity),
            )?;
            policy = out.policy;
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(cfg.train.seed, 0x73616d70, round as u64));
            for ((x, y), item) in dataset.iter().zip(&items) {
                for _ in 0..cfg.samples_per_pair {
                    let traj = sample_sequence(
                        &policy,
                        &item.condition,
                        T::one(),
                        &mut rng,
                        &FreeEnv,
                        TrajectorySource::OnPolicy,
                    );
                    m_samples.push((
                        x.clone(),
                        TokenSequence::from_ids(traj.sequence.ids().to_vec()),
                        y.clone(),
                        T::one(),
                    ));
                }
            }
        }
        teacher = Arc::new(teacher.m_step_update(&m_samples)?);
        metrics.push(EmRound {
            round,
            data_log_likelihood: data_log_likelihood(
                &teacher,
                dataset,
                cfg.max_z_len,
                cfg.cap,
            )?,
        });
    }
    policy = policy.reteach(Arc::clone(&teacher))?;
    Ok((teacher, policy, metrics))
}
