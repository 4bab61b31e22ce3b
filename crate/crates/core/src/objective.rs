//! The modified subtrajectory balance loss and its diagnostic special cases.
//!
//! For a stop-terminated sequence z of length n the loss sums, over prefix
//! pairs 0 <= i < j <= n,
//!
//! ```text
//! ( log[ R(z_{1:i} stop) * prod_{k=i+1..j} q(z_k | .) * q(stop | z_{1:j}) ]
//!   - log[ R(z_{1:j} stop) * q(stop | z_{1:i}) ] )^2
//! ```
//!
//! Each summand telescopes to (A_j - A_i)^2 with
//! A_m = cumulative step log-prob + stop log-prob - log prefix reward,
//! which is how both evaluation paths compute it. Zero loss on every
//! trajectory of a fully terminable space is equivalent to the terminal
//! distribution matching R up to normalization.
//!
//! Pair indices are restricted to prefixes where termination is a defined
//! event: the environment must not be forcing a token there and the prefix
//! reward must be positive. The stop probabilities entering the loss come
//! from the training view of the policy (min-length stop mask lifted), so
//! every included summand is finite and every transition keeps receiving
//! gradient; at min_len = 0 this coincides with the sampled distributions.

use thiserror::Error;

use crate::autodiff::Var;
use crate::policy::{env_decisions, PolicyDist, PolicyError, TapeEval};
use crate::scalar::{fp, Scalar};
use crate::seq::{EnvDecision, Environment, TokenSequence};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("sequence must be terminated")]
    Unterminated,
    #[error("sequence is unreachable under the policy and environment")]
    Unreachable,
    #[error("terminal reward is zero")]
    ZeroTerminalReward,
    #[error("non-finite policy log-probability on the realized path")]
    NonFinitePath,
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Unnormalized log-density over terminated sequences.
pub trait RewardFn<T: Scalar> {
    /// log R(z); negative infinity encodes zero reward.
    fn log_reward(&self, z: &TokenSequence) -> T;
}

impl<T: Scalar, F: Fn(&TokenSequence) -> T> RewardFn<T> for F {
    fn log_reward(&self, z: &TokenSequence) -> T {
        self(z)
    }
}

/// Loss value plus the individual squared log-ratio terms.
#[derive(Debug, Clone)]
pub struct LossReport<T: Scalar> {
    pub total: T,
    /// (i, j, squared log-ratio) for every included pair.
    pub per_pair: Vec<(usize, usize, T)>,
    pub n_terms: usize,
}

impl<T: Scalar> LossReport<T> {
    /// The (0, n) entry, if it was included; zero otherwise.
    pub fn full_trajectory_term(&self, n: usize) -> T {
        self.per_pair
            .iter()
            .find(|(i, j, _)| *i == 0 && *j == n)
            .map(|(_, _, v)| *v)
            .unwrap_or_else(T::zero)
    }
}

/// Per-prefix scaffolding shared by the value and tape paths.
struct Prefixes<T: Scalar> {
    /// Environment decision at every prefix 0..=n.
    decisions: Vec<EnvDecision>,
    /// log R(prefix stop) at terminable prefixes, NaN elsewhere.
    log_rewards: Vec<T>,
    /// Indices where a pair endpoint may sit.
    terminable: Vec<bool>,
}

fn prefixes<T: Scalar, R: RewardFn<T> + ?Sized>(
    vocab: &crate::seq::Vocabulary,
    max_len: usize,
    env: &dyn Environment,
    z: &TokenSequence,
    reward: &R,
) -> Result<Prefixes<T>, ObjectiveError> {
    if !z.is_terminated() {
        return Err(ObjectiveError::Unterminated);
    }
    if z.len() > max_len {
        return Err(ObjectiveError::Unreachable);
    }
    let decisions = env_decisions(vocab, z, env).ok_or(ObjectiveError::Unreachable)?;
    let n = z.len();
    let mut log_rewards = vec![T::nan(); n + 1];
    let mut terminable = vec![false; n + 1];
    for i in 0..=n {
        let free = decisions[i] == EnvDecision::Free;
        let env_stop = i == n && decisions[i] == EnvDecision::Reject;
        if !free && !env_stop {
            continue;
        }
        let r = reward.log_reward(&z.prefix(i).expect("prefix in range").as_terminated());
        if i == n && r == T::neg_infinity() {
            return Err(ObjectiveError::ZeroTerminalReward);
        }
        if r == T::neg_infinity() {
            continue; // zero-reward prefix: excluded endpoint
        }
        log_rewards[i] = r;
        terminable[i] = true;
    }
    Ok(Prefixes {
        decisions,
        log_rewards,
        terminable,
    })
}

/// Subtrajectory balance loss of one trajectory, exact values.
pub fn subtb_loss<T, P, R>(
    policy: &P,
    env: &dyn Environment,
    condition: &TokenSequence,
    z: &TokenSequence,
    reward: &R,
) -> Result<LossReport<T>, ObjectiveError>
where
    T: Scalar,
    P: PolicyDist<T> + ?Sized,
    R: RewardFn<T> + ?Sized,
{
    let pre = prefixes(policy.vocab(), policy.max_len(), env, z, reward)?;
    let n = z.len();
    let stop_id = policy.vocab().stop_id();

    // A_m = cumulative step log-prob + stop log-prob - prefix log-reward
    let mut anchors: Vec<Option<T>> = vec![None; n + 1];
    let mut cum = T::zero();
    for i in 0..=n {
        if pre.terminable[i] {
            let stop_lp = match pre.decisions[i] {
                EnvDecision::Reject => T::zero(),
                _ => policy.log_dist_train(condition, &z.ids()[..i])[stop_id],
            };
            if stop_lp > T::neg_infinity() {
                anchors[i] = Some(cum + stop_lp - pre.log_rewards[i]);
            }
        }
        if i < n {
            let step = match pre.decisions[i] {
                EnvDecision::Force(_) => T::zero(),
                _ => policy.log_dist_train(condition, &z.ids()[..i])[z.ids()[i]],
            };
            if step == T::neg_infinity() {
                return Err(ObjectiveError::NonFinitePath);
            }
            cum = cum + step;
        }
    }

    let mut per_pair = Vec::new();
    let mut total = T::zero();
    for i in 0..n {
        let Some(ai) = anchors[i] else { continue };
        for j in (i + 1)..=n {
            let Some(aj) = anchors[j] else { continue };
            let term = (aj - ai) * (aj - ai);
            total = total + term;
            per_pair.push((i, j, term));
        }
    }
    let n_terms = per_pair.len();
    Ok(LossReport {
        total,
        per_pair,
        n_terms,
    })
}

/// Trajectory balance diagnostic: the (0, n) pair alone.
pub fn tb_loss<T, P, R>(
    policy: &P,
    env: &dyn Environment,
    condition: &TokenSequence,
    z: &TokenSequence,
    reward: &R,
) -> Result<T, ObjectiveError>
where
    T: Scalar,
    P: PolicyDist<T> + ?Sized,
    R: RewardFn<T> + ?Sized,
{
    Ok(subtb_loss(policy, env, condition, z, reward)?.full_trajectory_term(z.len()))
}

/// Mean subtrajectory balance total over a batch.
pub fn batch_loss<T, P, R>(
    policy: &P,
    env: &dyn Environment,
    batch: &[(TokenSequence, TokenSequence, R)],
    // (condition, z, reward)
) -> Result<T, ObjectiveError>
where
    T: Scalar,
    P: PolicyDist<T> + ?Sized,
    R: RewardFn<T>,
{
    if batch.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    let mut total = T::zero();
    for (condition, z, reward) in batch {
        total = total + subtb_loss(policy, env, condition, z, reward)?.total;
    }
    Ok(total / fp::<T>(batch.len() as f64))
}

/// Tape-path subtrajectory balance loss for training.
pub fn subtb_loss_tape<T, R>(
    eval: &mut TapeEval<'_, T>,
    env: &dyn Environment,
    condition: &TokenSequence,
    z: &TokenSequence,
    reward: &R,
) -> Result<Var<T>, ObjectiveError>
where
    T: Scalar,
    R: RewardFn<T> + ?Sized,
{
    let policy = eval.policy();
    let pre = prefixes(policy.vocab(), policy.max_len(), env, z, reward)?;
    let n = z.len();
    let stop_id = policy.vocab().stop_id();

    let mut anchors: Vec<Option<Var<T>>> = vec![None; n + 1];
    let mut cum: Option<Var<T>> = None;
    for i in 0..=n {
        if pre.terminable[i] {
            let stop_lp = match pre.decisions[i] {
                EnvDecision::Reject => eval.tape.constant(T::zero()),
                _ => {
                    let state = eval.state(condition, &z.ids()[..i]);
                    state.train[stop_id].clone()
                }
            };
            if stop_lp.value() > T::neg_infinity() {
                let anchor = match &cum {
                    Some(c) => c.clone() + stop_lp,
                    None => stop_lp,
                } - pre.log_rewards[i];
                anchors[i] = Some(anchor);
            }
        }
        if i < n {
            let step = match pre.decisions[i] {
                EnvDecision::Force(_) => None,
                _ => {
                    let state = eval.state(condition, &z.ids()[..i]);
                    let lp = state.train[z.ids()[i]].clone();
                    if lp.value() == T::neg_infinity() {
                        return Err(ObjectiveError::NonFinitePath);
                    }
                    Some(lp)
                }
            };
            cum = match (cum, step) {
                (Some(c), Some(s)) => Some(c + s),
                (Some(c), None) => Some(c),
                (None, s) => s,
            };
        }
    }

    let mut terms = Vec::new();
    for i in 0..n {
        let Some(ai) = &anchors[i] else { continue };
        for j in (i + 1)..=n {
            let Some(aj) = &anchors[j] else { continue };
            terms.push((aj.clone() - ai.clone()).square());
        }
    }
    Ok(eval.tape.sum(&terms))
}

/// Tape-path batch mean.
pub fn batch_loss_tape<T, R>(
    eval: &mut TapeEval<'_, T>,
    env: &dyn Environment,
    batch: &[(TokenSequence, TokenSequence, R)],
) -> Result<Var<T>, ObjectiveError>
where
    T: Scalar,
    R: RewardFn<T>,
{
    if batch.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    let mut terms = Vec::with_capacity(batch.len());
    for (condition, z, reward) in batch {
        terms.push(subtb_loss_tape(eval, env, condition, z, reward)?);
    }
    Ok(eval.tape.sum(&terms) * (T::one() / fp::<T>(batch.len() as f64)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicyDist;
    use crate::seq::{FreeEnv, TokenId, Vocabulary};
    use approx::assert_abs_diff_eq;
    use std::collections::HashMap;

    /// Hand-specified conditionals for micro instances.
    struct TablePolicy {
        vocab: Vocabulary,
        min_len: usize,
        max_len: usize,
        rows: HashMap<Vec<TokenId>, Vec<f64>>,
    }

    impl PolicyDist<f64> for TablePolicy {
        fn vocab(&self) -> &Vocabulary {
            &self.vocab
        }
        fn min_len(&self) -> usize {
            self.min_len
        }
        fn max_len(&self) -> usize {
            self.max_len
        }
        fn logits(&self, _condition: &TokenSequence, prefix: &[TokenId]) -> Vec<f64> {
            self.rows
                .get(prefix)
                .map(|probs| probs.iter().map(|p| p.ln()).collect())
                .unwrap_or_else(|| vec![0.0; self.vocab.size() + 1])
        }
    }

    fn single_token_instance() -> TablePolicy {
        // |V| = 1: q(a|e) = 0.6, q(stop|e) = 0.4, q(stop|a) = 0.7
        let vocab = Vocabulary::new(["a"]).unwrap();
        let mut rows = HashMap::new();
        rows.insert(vec![], vec![0.6, 0.4]);
        rows.insert(vec![0], vec![0.3, 0.7]);
        TablePolicy {
            vocab,
            min_len: 0,
            max_len: 5,
            rows,
        }
    }

    fn single_token_reward(z: &TokenSequence) -> f64 {
        // R(stop) = 1, R(a stop) = 2, tiny floor deeper
        match z.len() {
            0 => 0.0f64,
            1 => 2.0f64.ln(),
            _ => -30.0,
        }
    }

    #[test]
    fn empty_sequence_has_empty_pair_set() {
        let policy = single_token_instance();
        let z = TokenSequence::terminated_from(vec![]);
        let report = subtb_loss(
            &policy,
            &FreeEnv,
            &TokenSequence::empty(),
            &z,
            &single_token_reward,
        )
        .unwrap();
        assert_eq!(report.total, 0.0);
        assert_eq!(report.n_terms, 0);
        assert_eq!(
            tb_loss(
                &policy,
                &FreeEnv,
                &TokenSequence::empty(),
                &z,
                &single_token_reward
            )
            .unwrap(),
            0.0
        );
    }

    #[test]
    fn hand_evaluated_single_pair() {
        let policy = single_token_instance();
        let z = TokenSequence::terminated_from(vec![0]);
        let report = subtb_loss(
            &policy,
            &FreeEnv,
            &TokenSequence::empty(),
            &z,
            &single_token_reward,
        )
        .unwrap();
        let expected = (1.0f64 * 0.6 * 0.7 / (2.0 * 0.4)).ln().powi(2);
        assert_eq!(report.n_terms, 1);
        assert_abs_diff_eq!(report.total, expected, epsilon = 1e-12);
        assert_abs_diff_eq!(report.total, 0.4152, epsilon = 1e-4);

        // single pair, so the trajectory-balance diagnostic equals the total
        let tb = tb_loss(
            &policy,
            &FreeEnv,
            &TokenSequence::empty(),
            &z,
            &single_token_reward,
        )
        .unwrap();
        assert_abs_diff_eq!(tb, report.total, epsilon = 1e-15);
    }

    #[test]
    fn batch_mean_of_hand_values() {
        let policy = single_token_instance();
        let batch = vec![
            (
                TokenSequence::empty(),
                TokenSequence::terminated_from(vec![]),
                single_token_reward as fn(&TokenSequence) -> f64,
            ),
            (
                TokenSequence::empty(),
                TokenSequence::terminated_from(vec![0]),
                single_token_reward as fn(&TokenSequence) -> f64,
            ),
        ];
        let mean = batch_loss(&policy, &FreeEnv, &batch).unwrap();
        assert_abs_diff_eq!(mean, 0.2076, epsilon = 1e-4);
        let empty: Vec<(TokenSequence, TokenSequence, fn(&TokenSequence) -> f64)> = vec![];
        assert!(matches!(
            batch_loss(&policy, &FreeEnv, &empty),
            Err(ObjectiveError::EmptyBatch)
        ));
    }

    #[test]
    fn matched_policy_telescopes_to_zero() {
        // q(stop|prefix) proportional to R(prefix stop) everywhere: the
        // exact conditionals of the normalized reward on a depth-2 space.
        let vocab = Vocabulary::new(["a", "b"]).unwrap();
        // rewards over terminals by length: R indexed by sequence
        let reward = |z: &TokenSequence| -> f64 {
            let weight = match z.ids() {
                [] => 1.0,
                [0] => 2.0,
                [1] => 3.0,
                [0, 0] => 1.0,
                [0, 1] => 4.0,
                [1, 0] => 2.0,
                [1, 1] => 1.0,
                _ => return f64::NEG_INFINITY,
            };
            (weight as f64).ln()
        };
        // subtree masses
        let mass = |prefix: &[TokenId]| -> f64 {
            let all: [&[TokenId]; 7] = [&[], &[0], &[1], &[0, 0], &[0, 1], &[1, 0], &[1, 1]];
            all.iter()
                .filter(|ids| ids.starts_with(prefix))
                .map(|ids| reward(&TokenSequence::terminated_from(ids.to_vec())).exp())
                .sum()
        };
        let mut rows = HashMap::new();
        for prefix in [vec![], vec![0], vec![1]] {
            let m = mass(&prefix);
            let mut ext_a = prefix.clone();
            ext_a.push(0);
            let mut ext_b = prefix.clone();
            ext_b.push(1);
            let r_here = reward(&TokenSequence::terminated_from(prefix.clone())).exp();
            rows.insert(
                prefix,
                vec![mass(&ext_a) / m, mass(&ext_b) / m, r_here / m],
            );
        }
        for prefix in [vec![0, 0], vec![0, 1], vec![1, 0], vec![1, 1]] {
            rows.insert(prefix, vec![0.0, 0.0, 1.0]);
        }
        let policy = TablePolicy {
            vocab,
            min_len: 0,
            max_len: 2,
            rows,
        };
        for ids in [vec![], vec![0], vec![1], vec![0, 1], vec![1, 1], vec![0, 0]] {
            let z = TokenSequence::terminated_from(ids);
            let report =
                subtb_loss(&policy, &FreeEnv, &TokenSequence::empty(), &z, &reward).unwrap();
            assert!(
                report.total < 1e-10,
                "loss {} on {:?}",
                report.total,
                z.ids()
            );
        }
    }

    #[test]
    fn reward_scale_invariance() {
        let policy = single_token_instance();
        let z = TokenSequence::terminated_from(vec![0]);
        let base = subtb_loss(
            &policy,
            &FreeEnv,
            &TokenSequence::empty(),
            &z,
            &single_token_reward,
        )
        .unwrap();
        let scaled = |z: &TokenSequence| single_token_reward(z) + 17.3;
        let shifted = subtb_loss(&policy, &FreeEnv, &TokenSequence::empty(), &z, &scaled).unwrap();
        for ((i1, j1, t1), (i2, j2, t2)) in base.per_pair.iter().zip(&shifted.per_pair) {
            assert_eq!((i1, j1), (i2, j2));
            assert_abs_diff_eq!(t1, t2, epsilon = 1e-12);
        }
    }

    #[test]
    fn log_ratio_triangle_inequality() {
        let policy = single_token_instance();
        let z = TokenSequence::terminated_from(vec![0, 0, 0]);
        let reward = |z: &TokenSequence| -> f64 { -(z.len() as f64) * 0.3 };
        let report =
            subtb_loss(&policy, &FreeEnv, &TokenSequence::empty(), &z, &reward).unwrap();
        let ratio = |i: usize, j: usize| -> f64 {
            report
                .per_pair
                .iter()
                .find(|(a, b, _)| (*a, *b) == (i, j))
                .unwrap()
                .2
                .sqrt()
        };
        for i in 0..=3 {
            for j in (i + 1)..=3 {
                for k in (j + 1)..=3 {
                    assert!(ratio(i, k) <= ratio(i, j) + ratio(j, k) + 1e-12);
                }
            }
        }
        // totals agree with the per-pair sum
        let sum: f64 = report.per_pair.iter().map(|(_, _, t)| t).sum();
        assert_abs_diff_eq!(report.total, sum, epsilon = 1e-10);
    }

    #[test]
    fn zero_terminal_reward_is_an_error() {
        let policy = single_token_instance();
        let z = TokenSequence::terminated_from(vec![0, 0]);
        let reward = |z: &TokenSequence| -> f64 {
            if z.len() == 2 {
                f64::NEG_INFINITY
            } else {
                0.0
            }
        };
        assert!(matches!(
            subtb_loss(&policy, &FreeEnv, &TokenSequence::empty(), &z, &reward),
            Err(ObjectiveError::ZeroTerminalReward)
        ));
    }

    #[test]
    fn zero_reward_prefix_is_excluded_not_fatal() {
        let policy = single_token_instance();
        let z = TokenSequence::terminated_from(vec![0]);
        let reward = |z: &TokenSequence| -> f64 {
            if z.is_empty() {
                f64::NEG_INFINITY
            } else {
                0.5
            }
        };
        let report =
            subtb_loss(&policy, &FreeEnv, &TokenSequence::empty(), &z, &reward).unwrap();
        assert_eq!(report.n_terms, 0);
        assert_eq!(report.total, 0.0);
    }

    #[test]
    fn tape_and_value_paths_agree() {
        use crate::lm::TabularLm;
        use crate::policy::{DeltaPolicy, PolicyConfig};
        use rand::SeedableRng;
        use std::sync::Arc;

        let v = Arc::new(Vocabulary::new(["a", "b"]).unwrap());
        let corpus: Vec<TokenSequence> = ["a b", "b a", "a"]
            .iter()
            .map(|l| v.parse_seq(l).unwrap())
            .collect();
        let teacher = Arc::new(TabularLm::fit_ngram(Arc::clone(&v), &corpus, 1, 0.2).unwrap());
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let mut policy = DeltaPolicy::init(
            teacher,
            PolicyConfig {
                context_window: 2,
                hidden: 4,
                min_len: 1,
                max_len: 3,
            },
            &mut rng,
        )
        .unwrap();
        use rand::Rng;
        for p in policy.params_mut().iter_mut() {
            *p += rng.gen_range(-0.1..0.1);
        }
        let reward = |z: &TokenSequence| -> f64 { -(z.len() as f64) * 0.7 + 0.2 };
        let cond = TokenSequence::from_ids(vec![1]);
        for ids in [vec![0], vec![0, 1], vec![1, 1, 0]] {
            let z = TokenSequence::terminated_from(ids);
            let value = subtb_loss(&policy, &FreeEnv, &cond, &z, &reward)
                .unwrap()
                .total;
            let tape_value = policy
                .grad(|eval| {
                    subtb_loss_tape(eval, &FreeEnv, &cond, &z, &reward)
                        .map_err(|_| crate::policy::PolicyError::NonFiniteLoss)
                })
                .unwrap()
                .loss;
            assert_abs_diff_eq!(value, tape_value, epsilon = 1e-10);
        }
    }
}
