//! Training: batch composition from three trajectory sources, the priority
//! replay buffer, annealing schedules, the AdamW update, the balance-loss
//! training loop, and the advantage policy-gradient baseline.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::objective::{batch_loss_tape, subtb_loss, ObjectiveError};
use crate::policy::{
    sample_sequence, terminal_log_prob, DeltaPolicy, GradientTape, PolicyDist, PolicyError,
};
use crate::scalar::{fp, Scalar};
use crate::seq::{
    Environment, TokenId, TokenSequence, Trajectory, TrajectorySource,
};
use crate::tasks::{RewardSpec, TaskError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("no training items supplied")]
    NoItems,
    #[error("non-finite loss at step {step}; offending trajectory: {trajectory}")]
    NonFiniteLoss { step: usize, trajectory: String },
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Piecewise-linear annealing: start to end over `horizon` steps, constant
/// afterwards.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule<T> {
    pub start: T,
    pub end: T,
    pub horizon: usize,
}

impl<T: Scalar> Schedule<T> {
    pub fn constant(value: T) -> Self {
        Self {
            start: value,
            end: value,
            horizon: 1,
        }
    }

    pub fn value(&self, step: usize) -> T {
        let horizon = self.horizon.max(1);
        let t = fp::<T>(step.min(horizon) as f64 / horizon as f64);
        self.start + (self.end - self.start) * t
    }
}

/// Total order over finite-or-infinite scalars for the priority queue.
#[derive(Debug, Clone, Copy, PartialEq)]
struct ByReward<T>(T);

impl<T: Scalar> Eq for ByReward<T> {}

impl<T: Scalar> PartialOrd for ByReward<T> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl<T: Scalar> Ord for ByReward<T> {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0
            .partial_cmp(&other.0)
            .expect("rewards are never NaN")
    }
}

#[derive(Debug, Default, Clone)]
struct KeyQueue<T: Scalar> {
    ordered: BTreeSet<(ByReward<T>, Vec<TokenId>)>,
    known: HashSet<Vec<TokenId>>,
}

/// Capacity-bounded priority store of high-reward sequences per condition.
/// The minimum-reward entry is evicted first; duplicates are rejected.
#[derive(Debug, Clone)]
pub struct ReplayBuffer<T: Scalar> {
    capacity: usize,
    entries: HashMap<Vec<TokenId>, KeyQueue<T>>,
}

impl<T: Scalar> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: HashMap::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Inserts unless duplicate; when full, replaces the minimum if the new
    /// entry beats it. Returns whether the entry was accepted.
    pub fn insert(&mut self, key: &TokenSequence, z: &TokenSequence, log_reward: T) -> bool {
        let queue = self.entries.entry(key.ids().to_vec()).or_default();
        if queue.known.contains(z.ids()) {
            return false;
        }
        if queue.ordered.len() >= self.capacity {
            let min = queue
                .ordered
                .first()
                .map(|(r, _)| r.0)
                .expect("full queue has a minimum");
            if !(log_reward > min) {
                return false;
            }
            let (_, evicted) = queue.ordered.pop_first().expect("nonempty");
            queue.known.remove(&evicted);
        }
        queue.known.insert(z.ids().to_vec());
        queue.ordered.insert((ByReward(log_reward), z.ids().to_vec()));
        true
    }

    pub fn len_for(&self, key: &TokenSequence) -> usize {
        self.entries
            .get(key.ids())
            .map(|q| q.ordered.len())
            .unwrap_or(0)
    }

    pub fn total_len(&self) -> usize {
        self.entries.values().map(|q| q.ordered.len()).sum()
    }

    pub fn min_log_reward(&self, key: &TokenSequence) -> Option<T> {
        self.entries
            .get(key.ids())
            .and_then(|q| q.ordered.first())
            .map(|(r, _)| r.0)
    }

    /// Draws an entry for the key: uniform, or reward-proportional when
    /// requested. `pick` is a uniform variate in [0, 1).
    pub fn draw(
        &self,
        key: &TokenSequence,
        pick: f64,
        reward_proportional: bool,
    ) -> Option<(TokenSequence, T)> {
        let queue = self.entries.get(key.ids())?;
        if queue.ordered.is_empty() {
            return None;
        }
        let items: Vec<(&ByReward<T>, &Vec<TokenId>)> =
            queue.ordered.iter().map(|(r, z)| (r, z)).collect();
        let idx = if reward_proportional {
            let max = items
                .iter()
                .map(|(r, _)| r.0)
                .fold(T::neg_infinity(), |a, b| if b > a { b } else { a });
            let weights: Vec<f64> = items
                .iter()
                .map(|(r, _)| (r.0 - max).exp().to_f64().unwrap_or(0.0))
                .collect();
            let total: f64 = weights.iter().sum();
            let mut acc = 0.0;
            let mut chosen = items.len() - 1;
            for (i, w) in weights.iter().enumerate() {
                acc += w / total;
                if pick < acc {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            ((pick * items.len() as f64) as usize).min(items.len() - 1)
        };
        let (r, z) = items[idx];
        Some((TokenSequence::terminated_from(z.clone()), r.0))
    }
}

/// Seeding summary: accepted inserts and demos skipped for zero reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedReport {
    pub seeded: usize,
    pub skipped: usize,
}

/// Inserts demonstrations with their untempered log-rewards. Demos whose
/// reward is zero are skipped and counted.
pub fn seed_buffer<T: Scalar>(
    buf: &mut ReplayBuffer<T>,
    demos: &[(TokenSequence, TokenSequence, RewardSpec<T>)],
) -> SeedReport {
    let mut report = SeedReport {
        seeded: 0,
        skipped: 0,
    };
    for (condition, z, spec) in demos {
        let lr = spec.log_reward_raw(z);
        if lr == T::neg_infinity() {
            report.skipped += 1;
            continue;
        }
        if buf.insert(condition, z, lr) {
            report.seeded += 1;
        }
    }
    report
}

/// Full training configuration; defaults mirror the published
/// hyperparameter table for the arithmetic task.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig<T: Scalar> {
    pub steps: usize,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub learning_rate: T,
    pub warmup_updates: usize,
    pub mix_on_policy: T,
    pub mix_tempered: T,
    pub mix_replay: T,
    pub behavior_temp_min: T,
    pub behavior_temp_max: T,
    pub reward_temp: Schedule<T>,
    pub buffer_capacity: usize,
    pub reward_proportional_replay: bool,
    pub weight_decay: T,
    pub entropy_bonus: T,
    pub seed: u64,
}

impl<T: Scalar> Default for TrainConfig<T> {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 16,
            grad_accum: 32,
            learning_rate: fp(0.0001),
            warmup_updates: 0,
            mix_on_policy: fp(0.5),
            mix_tempered: fp(0.25),
            mix_replay: fp(0.25),
            behavior_temp_min: fp(0.5),
            behavior_temp_max: fp(2.0),
            reward_temp: Schedule {
                start: fp(1.1),
                end: fp(0.5),
                horizon: 150,
            },
            buffer_capacity: 50,
            reward_proportional_replay: false,
            weight_decay: T::zero(),
            entropy_bonus: T::zero(),
            seed: 0,
        }
    }
}

impl<T: Scalar> TrainConfig<T> {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: &str| Err(TrainError::Config(msg.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.grad_accum == 0 {
            return bad("grad_accum must be positive");
        }
        let mix = self.mix_on_policy + self.mix_tempered + self.mix_replay;
        if self.mix_on_policy < T::zero()
            || self.mix_tempered < T::zero()
            || self.mix_replay < T::zero()
            || (mix - T::one()).abs() > fp(1e-9)
        {
            return bad("source mix fractions must be nonnegative and sum to 1");
        }
        if !(self.behavior_temp_min > T::zero())
            || self.behavior_temp_max < self.behavior_temp_min
        {
            return bad("behavior temperature bounds must satisfy 0 < min <= max");
        }
        if !(self.reward_temp.start > T::zero()) || !(self.reward_temp.end > T::zero()) {
            return bad("reward temperatures must be positive");
        }
        if !(self.learning_rate > T::zero()) {
            return bad("learning rate must be positive");
        }
        Ok(())
    }
}

/// AdamW with bias correction; decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW<T: Scalar> {
    pub learning_rate: T,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
    pub weight_decay: T,
    first_moment: Vec<T>,
    second_moment: Vec<T>,
    step_count: usize,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(n_params: usize, learning_rate: T, weight_decay: T) -> Self {
        Self {
            learning_rate,
            beta1: fp(0.9),
            beta2: fp(0.999),
            epsilon: fp(1e-8),
            weight_decay,
            first_moment: vec![T::zero(); n_params],
            second_moment: vec![T::zero(); n_params],
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }

    /// Applies one update; `lr_scale` multiplies the learning rate (warmup).
    pub fn step(&mut self, params: &mut [T], grad: &[T], lr_scale: T) {
        assert_eq!(params.len(), grad.len());
        assert_eq!(params.len(), self.first_moment.len());
        self.step_count += 1;
        let t = fp::<T>(self.step_count as f64);
        let lr = self.learning_rate * lr_scale;
        let bias1 = T::one() - self.beta1.powf(t);
        let bias2 = T::one() - self.beta2.powf(t);
        for i in 0..params.len() {
            let g = grad[i];
            self.first_moment[i] = self.beta1 * self.first_moment[i] + (T::one() - self.beta1) * g;
            self.second_moment[i] =
                self.beta2 * self.second_moment[i] + (T::one() - self.beta2) * g * g;
            let m_hat = self.first_moment[i] / bias1;
            let v_hat = self.second_moment[i] / bias2;
            params[i] = params[i]
                - lr * (m_hat / (v_hat.sqrt() + self.epsilon) + self.weight_decay * params[i]);
        }
    }
}

/// One training condition and its (untempered) reward.
#[derive(Debug, Clone)]
pub struct TrainItem<T: Scalar> {
    pub condition: TokenSequence,
    pub reward: RewardSpec<T>,
}

/// Per-step metrics record. `wall_ms` is excluded from reproducibility
/// comparisons (it is the one non-deterministic field).
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord<T: Scalar> {
    pub step: usize,
    pub loss: T,
    pub mean_log_reward: T,
    pub reward_temp: T,
    pub buffer_size: usize,
    pub rejected: usize,
    pub wall_ms: u64,
}

/// Training result: final policy plus the full metrics stream.
pub struct TrainOutcome<T: Scalar> {
    pub policy: DeltaPolicy<T>,
    pub metrics: Vec<MetricsRecord<T>>,
    pub buffer: ReplayBuffer<T>,
}

/// splitmix64-style deterministic seed derivation.
pub fn derive_seed(root: u64, a: u64, b: u64) -> u64 {
    let mut x = root ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^= x >> 31;
    x
}

/// Largest-remainder allocation of `total` slots to the three sources.
fn source_counts<T: Scalar>(cfg: &TrainConfig<T>, total: usize) -> [usize; 3] {
    let fracs = [cfg.mix_on_policy, cfg.mix_tempered, cfg.mix_replay];
    let raw: Vec<f64> = fracs
        .iter()
        .map(|f| f.to_f64().unwrap_or(0.0) * total as f64)
        .collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut remainders: Vec<(usize, f64)> = raw
        .iter()
        .enumerate()
        .map(|(i, r)| (i, r - r.floor()))
        .collect();
    // ties resolve toward the earlier source (on-policy first)
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for k in 0..(total - assigned) {
        counts[remainders[k % 3].0] += 1;
    }
    [counts[0], counts[1], counts[2]]
}

/// Recomputes step and stop log-probabilities of a stored sequence under
/// the current policy. None when the sequence is unreachable.
pub fn rescore_trajectory<T: Scalar>(
    policy: &DeltaPolicy<T>,
    condition: &TokenSequence,
    z: &TokenSequence,
    env: &dyn Environment,
) -> Option<Trajectory<T>> {
    use crate::policy::{env_decisions, PolicyDist};
    use crate::seq::EnvDecision;
    let decisions = env_decisions(policy.vocab(), z, env)?;
    if z.len() > policy.max_len() {
        return None;
    }
    let stop_id = policy.vocab().stop_id();
    let mut step_logprobs = Vec::with_capacity(z.len());
    let mut stop_logprobs = Vec::with_capacity(z.len() + 1);
    for (i, decision) in decisions.iter().enumerate() {
        match decision {
            EnvDecision::Force(_) => {
                stop_logprobs.push(T::neg_infinity());
                step_logprobs.push(T::zero());
            }
            EnvDecision::Reject => {
                stop_logprobs.push(T::zero());
            }
            EnvDecision::Free => {
                let dist = policy.log_dist(condition, &z.ids()[..i]);
                stop_logprobs.push(dist[stop_id]);
                if i < z.len() {
                    let lp = dist[z.ids()[i]];
                    if lp == T::neg_infinity() {
                        return None;
                    }
                    step_logprobs.push(lp);
                }
            }
        }
    }
    Some(Trajectory {
        sequence: z.clone(),
        step_logprobs,
        stop_logprobs,
        source: TrajectorySource::Replay,
    })
}

/// Batch slot plan drawn up-front so sampling can run on any worker count
/// with identical results.
struct SlotPlan {
    item_idx: usize,
    source: TrajectorySource,
    behavior_temp: f64,
    seed: u64,
    replay_pick: f64,
}

/// Composes one training batch from the three trajectory sources in the
/// configured proportions. Replay slots fall back to on-policy when the
/// buffer has nothing for the condition.
pub fn compose_batch<T: Scalar>(
    policy: &DeltaPolicy<T>,
    buf: &ReplayBuffer<T>,
    items: &[TrainItem<T>],
    cfg: &TrainConfig<T>,
    step: usize,
    env: &dyn Environment,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(usize, Trajectory<T>)>, TrainError> {
    if items.is_empty() {
        return Err(TrainError::NoItems);
    }
    let [n_on, n_temp, n_replay] = source_counts(cfg, cfg.batch_size);
    let mut plans = Vec::with_capacity(cfg.batch_size);
    for slot in 0..cfg.batch_size {
        let source = if slot < n_on {
            TrajectorySource::OnPolicy
        } else if slot < n_on + n_temp {
            TrajectorySource::Tempered
        } else {
            TrajectorySource::Replay
        };
        let item_idx = rng.gen_range(0..items.len());
        let behavior_temp = rng.gen_range(
            cfg.behavior_temp_min.to_f64().unwrap()..=cfg.behavior_temp_max.to_f64().unwrap(),
        );
        let seed = derive_seed(cfg.seed, step as u64, slot as u64);
        let replay_pick: f64 = rng.gen();
        plans.push(SlotPlan {
            item_idx,
            source,
            behavior_temp,
            seed,
            replay_pick,
        });
    }
    let _ = n_replay;
    let sample_slot = |plan: &SlotPlan| -> (usize, Trajectory<T>) {
        let condition = &items[plan.item_idx].condition;
        let mut slot_rng = ChaCha8Rng::seed_from_u64(plan.seed);
        match plan.source {
            TrajectorySource::Replay => {
                if let Some((z, _)) =
                    buf.draw(condition, plan.replay_pick, cfg.reward_proportional_replay)
                {
                    if let Some(traj) = rescore_trajectory(policy, condition, &z, env) {
                        return (plan.item_idx, traj);
                    }
                }
                // fallback: on-policy draw
                let traj = sample_sequence(
                    policy,
                    condition,
                    T::one(),
                    &mut slot_rng,
                    env,
                    TrajectorySource::OnPolicy,
                );
                (plan.item_idx, traj)
            }
            TrajectorySource::Tempered => {
                let traj = sample_sequence(
                    policy,
                    condition,
                    fp::<T>(plan.behavior_temp),
                    &mut slot_rng,
                    env,
                    TrajectorySource::Tempered,
                );
                (plan.item_idx, traj)
            }
            TrajectorySource::OnPolicy => {
                let traj = sample_sequence(
                    policy,
                    condition,
                    T::one(),
                    &mut slot_rng,
                    env,
                    TrajectorySource::OnPolicy,
                );
                (plan.item_idx, traj)
            }
        }
    };
    let workers = worker_count();
    let out: Vec<(usize, Trajectory<T>)> = if workers <= 1 || plans.len() <= 1 {
        plans.iter().map(sample_slot).collect()
    } else {
        let chunk = plans.len().div_ceil(workers);
        let mut results: Vec<Option<(usize, Trajectory<T>)>> = vec![None; plans.len()];
        std::thread::scope(|scope| {
            for (chunk_idx, (plan_chunk, result_chunk)) in plans
                .chunks(chunk)
                .zip(results.chunks_mut(chunk))
                .enumerate()
            {
                let _ = chunk_idx;
                scope.spawn(move || {
                    for (plan, slot) in plan_chunk.iter().zip(result_chunk.iter_mut()) {
                        *slot = Some(sample_slot(plan));
                    }
                });
            }
        });
        results.into_iter().map(|r| r.expect("slot filled")).collect()
    };
    Ok(out)
}

/// Worker count from SEQFLOW_THREADS; 1 (the default) forces fully serial
/// execution. Batch results are identical at any setting because every slot
/// owns a derived seed.
pub fn worker_count() -> usize {
    std::env::var("SEQFLOW_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Runs the balance-objective training loop: compose, loss, gradient,
/// accumulate, update. Returns the trained policy, metrics, and the buffer.
pub fn train<T: Scalar>(
    mut policy: DeltaPolicy<T>,
    items: &[TrainItem<T>],
    env: &dyn Environment,
    cfg: &TrainConfig<T>,
    mut buffer: ReplayBuffer<T>,
) -> Result<TrainOutcome<T>, TrainError> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(TrainError::NoItems);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x747261696e, 0));
    let mut optimizer = AdamW::new(policy.param_count(), cfg.learning_rate, cfg.weight_decay);
    let mut metrics = Vec::with_capacity(cfg.steps);
    let mut grad_sum: Vec<T> = vec![T::zero(); policy.param_count()];
    let mut accumulated = 0usize;

    for step in 0..cfg.steps {
        let started = Instant::now();
        let reward_temp = cfg.reward_temp.value(step);
        let batch = compose_batch(&policy, &buffer, items, cfg, step, env, &mut rng)?;

        // score raw rewards, feed the buffer, and drop zero-reward samples;
        // environment-forced runs may overshoot max_len, and such
        // trajectories are dropped the same way rejections are
        let mut loss_batch: Vec<(TokenSequence, TokenSequence, RewardSpec<T>)> = Vec::new();
        let mut rejected = 0usize;
        let mut reward_sum = T::zero();
        let mut reward_count = 0usize;
        for (item_idx, traj) in &batch {
            let item = &items[*item_idx];
            let raw = item.reward.log_reward_raw(&traj.sequence);
            if raw == T::neg_infinity() || traj.sequence.len() > policy.max_len() {
                rejected += 1;
                continue;
            }
            reward_sum += raw;
            reward_count += 1;
            buffer.insert(&item.condition, &traj.sequence, raw);
            loss_batch.push((
                item.condition.clone(),
                traj.sequence.clone(),
                item.reward.with_temperature(reward_temp)?,
            ));
        }

        let loss_value = if loss_batch.is_empty() {
            T::zero()
        } else {
            let tape = policy.grad(|eval| {
                batch_loss_tape(eval, env, &loss_batch)
                    .map_err(|_| PolicyError::NonFiniteLoss)
            });
            let tape = match tape {
                Ok(t) => t,
                Err(PolicyError::NonFiniteLoss) | Err(PolicyError::NonFiniteGradient) => {
                    return Err(non_finite_diagnostic(
                        &policy, env, &loss_batch, step,
                    ));
                }
                Err(e) => return Err(e.into()),
            };
            for (g, acc) in tape.grad.iter().zip(grad_sum.iter_mut()) {
                *acc += *g;
            }
            accumulated += 1;
            tape.loss
        };

        if accumulated == cfg.grad_accum || (step + 1 == cfg.steps && accumulated > 0) {
            let scale = T::one() / fp::<T>(accumulated as f64);
            let grad: Vec<T> = grad_sum.iter().map(|g| *g * scale).collect();
            let warm = if cfg.warmup_updates == 0 {
                T::one()
            } else {
                fp::<T>(
                    ((optimizer.step_count() + 1) as f64 / cfg.warmup_updates as f64).min(1.0),
                )
            };
            optimizer.step(policy.params_mut(), &grad, warm);
            grad_sum.iter_mut().for_each(|g| *g = T::zero());
            accumulated = 0;
        }

        metrics.push(MetricsRecord {
            step,
            loss: loss_value,
            mean_log_reward: if reward_count > 0 {
                reward_sum / fp::<T>(reward_count as f64)
            } else {
                T::neg_infinity()
            },
            reward_temp,
            buffer_size: buffer.total_len(),
            rejected,
            wall_ms: started.elapsed().as_millis() as u64,
        });
    }
    Ok(TrainOutcome {
        policy,
        metrics,
        buffer,
    })
}

fn non_finite_diagnostic<T: Scalar>(
    policy: &DeltaPolicy<T>,
    env: &dyn Environment,
    batch: &[(TokenSequence, TokenSequence, RewardSpec<T>)],
    step: usize,
) -> TrainError {
    use crate::policy::PolicyDist;
    for (condition, z, reward) in batch {
        let finite = subtb_loss(policy, env, condition, z, reward)
            .map(|r| r.total.is_finite())
            .unwrap_or(false);
        if !finite {
            return TrainError::NonFiniteLoss {
                step,
                trajectory: policy.vocab().render(z),
            };
        }
    }
    TrainError::NonFiniteLoss {
        step,
        trajectory: "<gradient overflow without single offending trajectory>".to_string(),
    }
}

/// Advantage policy-gradient surrogate on one on-policy batch:
/// -(1/B) sum (R - baseline) log q(z) - entropy_bonus * mean state entropy.
pub fn policy_gradient_step<T: Scalar>(
    policy: &DeltaPolicy<T>,
    batch: &[(TokenSequence, TokenSequence, T)],
    baseline: T,
    entropy_bonus: T,
    env: &dyn Environment,
) -> Result<GradientTape<T>, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::Config("empty policy-gradient batch".into()));
    }
    let inv_b = T::one() / fp::<T>(batch.len() as f64);
    let tape = policy.grad(|eval| {
        let mut terms = Vec::new();
        for (condition, z, reward) in batch {
            let lp = eval
                .terminal_log_prob(condition, z, env)
                .ok_or(PolicyError::NonFiniteLoss)?;
            terms.push(lp * ((*reward - baseline) * inv_b));
        }
        let mut loss = -eval.tape.sum(&terms);
        if entropy_bonus != T::zero() {
            let mut entropy_terms = Vec::new();
            for (condition, z, _) in batch {
                for i in 0..=z.len() {
                    let state = eval.state(condition, &z.ids()[..i]);
                    for lp in state.sampled.iter() {
                        if lp.value() > T::neg_infinity() {
                            entropy_terms.push(lp.clone().exp() * lp.clone());
                        }
                    }
                }
            }
            loss = loss + eval.tape.sum(&entropy_terms) * (entropy_bonus * inv_b);
        }
        Ok(loss)
    })?;
    Ok(tape)
}

/// Reward-maximizing baseline training loop (on-policy, mean-reward
/// advantage). `log_space_rewards` uses log R as the reward signal, with a
/// floor for zero-reward trajectories.
pub fn train_policy_gradient<T: Scalar>(
    mut policy: DeltaPolicy<T>,
    items: &[TrainItem<T>],
    env: &dyn Environment,
    cfg: &TrainConfig<T>,
    log_space_rewards: bool,
) -> Result<TrainOutcome<T>, TrainError> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(TrainError::NoItems);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x7067, 0));
    let mut optimizer = AdamW::new(policy.param_count(), cfg.learning_rate, cfg.weight_decay);
    let mut metrics = Vec::with_capacity(cfg.steps);
    let log_floor = fp::<T>(-1e3);
    let mut grad_sum: Vec<T> = vec![T::zero(); policy.param_count()];
    let mut accumulated = 0usize;

    for step in 0..cfg.steps {
        let started = Instant::now();
        let mut batch: Vec<(TokenSequence, TokenSequence, T)> =
            Vec::with_capacity(cfg.batch_size);
        let mut reward_sum = T::zero();
        let mut rejected = 0usize;
        for slot in 0..cfg.batch_size {
            let item = &items[rng.gen_range(0..items.len())];
            let mut slot_rng =
                ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, step as u64, slot as u64));
            let traj = sample_sequence(
                &policy,
                &item.condition,
                T::one(),
                &mut slot_rng,
                env,
                TrajectorySource::OnPolicy,
            );
            // forced runs may overshoot max_len; such draws carry no
            // defined terminal likelihood and are skipped
            if traj.sequence.len() > policy.max_len() {
                rejected += 1;
                continue;
            }
            let raw = item.reward.log_reward_raw(&traj.sequence);
            let reward = if log_space_rewards {
                if raw.is_finite() {
                    raw.max(log_floor)
                } else {
                    log_floor
                }
            } else {
                raw.exp()
            };
            reward_sum += reward;
            batch.push((item.condition.clone(), traj.sequence, reward));
        }
        if batch.is_empty() {
            metrics.push(MetricsRecord {
                step,
                loss: T::zero(),
                mean_log_reward: T::neg_infinity(),
                reward_temp: T::one(),
                buffer_size: 0,
                rejected,
                wall_ms: started.elapsed().as_millis() as u64,
            });
            continue;
        }
        let baseline = reward_sum / fp::<T>(batch.len() as f64);
        let tape = policy_gradient_step(&policy, &batch, baseline, cfg.entropy_bonus, env)?;
        for (g, acc) in tape.grad.iter().zip(grad_sum.iter_mut()) {
            *acc += *g;
        }
        accumulated += 1;
        if accumulated == cfg.grad_accum || (step + 1 == cfg.steps && accumulated > 0) {
            let scale = T::one() / fp::<T>(accumulated as f64);
            let grad: Vec<T> = grad_sum.iter().map(|g| *g * scale).collect();
            let warm = if cfg.warmup_updates == 0 {
                T::one()
            } else {
                fp::<T>(
                    ((optimizer.step_count() + 1) as f64 / cfg.warmup_updates as f64).min(1.0),
                )
            };
            optimizer.step(policy.params_mut(), &grad, warm);
            grad_sum.iter_mut().for_each(|g| *g = T::zero());
            accumulated = 0;
        }
        metrics.push(MetricsRecord {
            step,
            loss: tape.loss,
            mean_log_reward: baseline,
            reward_temp: T::one(),
            buffer_size: 0,
            rejected,
            wall_ms: started.elapsed().as_millis() as u64,
        });
    }
    Ok(TrainOutcome {
        policy,
        metrics,
        buffer: ReplayBuffer::new(cfg.buffer_capacity),
    })
}

/// Convenience: log q(z | condition) under the masked policy, exposed for
/// reports.
pub fn policy_terminal_log_prob<T: Scalar>(
    policy: &DeltaPolicy<T>,
    condition: &TokenSequence,
    z: &TokenSequence,
    env: &dyn Environment,
) -> T {
    terminal_log_prob(policy, condition, z, env)
}
