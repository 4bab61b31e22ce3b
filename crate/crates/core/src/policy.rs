//! The trainable sampler: teacher conditionals plus a small feed-forward
//! logit adjustment, with length masking, tempered sampling, exact terminal
//! likelihoods, and reverse-mode gradients of loss closures.
//!
//! With all adjustment parameters at zero the policy's conditionals equal the
//! teacher's exactly; training moves only the adjustment.

use std::collections::HashMap;
use std::rc::Rc;
use std::sync::Arc;

use rand::Rng;
use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::lm::{checksum, LmError, TabularLm};
use crate::scalar::{fp, log_sum_exp, Scalar};
use crate::seq::{
    EnvDecision, Environment, SeqError, TokenId, TokenSequence, Trajectory, TrajectorySource,
    Vocabulary,
};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("prefix must be unterminated and no longer than max_len")]
    BadPrefix,
    #[error("parameter vector has length {got}, expected {want}")]
    ParamLen { got: usize, want: usize },
    #[error("min_len must not exceed max_len")]
    BadBounds,
    #[error("loss is not finite")]
    NonFiniteLoss,
    #[error("gradient entry is not finite")]
    NonFiniteGradient,
    #[error("policy checkpoint parse failure: {0}")]
    Checkpoint(String),
    #[error("checkpoint teacher checksum {got} does not match loaded teacher {want}")]
    TeacherMismatch { got: String, want: String },
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Seq(#[from] SeqError),
}

/// Shape of the adjustment network and the generation length bounds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolicyConfig {
    /// Number of trailing tokens of condition-plus-prefix fed to the
    /// adjustment network.
    pub context_window: usize,
    /// Hidden layer width.
    pub hidden: usize,
    /// Stop is masked while the generated prefix is shorter than this.
    pub min_len: usize,
    /// Generation terminates with probability 1 at this length.
    pub max_len: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            context_window: 4,
            hidden: 64,
            min_len: 0,
            max_len: 8,
        }
    }
}

/// Anything that assigns a per-state log-distribution over V plus stop.
///
/// Implemented by the trainable [`DeltaPolicy`] and by the oracle's exact
/// conditional tables, so losses and samplers accept either.
pub trait PolicyDist<T: Scalar> {
    fn vocab(&self) -> &Vocabulary;
    fn min_len(&self) -> usize;
    fn max_len(&self) -> usize;

    /// Pre-mask scores over V plus stop at (condition, prefix).
    fn logits(&self, condition: &TokenSequence, prefix: &[TokenId]) -> Vec<T>;

    /// Masked, normalized log-distribution. Stop is impossible below
    /// min_len and certain at max_len.
    fn log_dist(&self, condition: &TokenSequence, prefix: &[TokenId]) -> Vec<T> {
        masked_log_dist(
            self.logits(condition, prefix),
            prefix.len(),
            self.min_len(),
            self.max_len(),
            false,
        )
    }

    /// Loss-side view: the min-length stop mask is lifted so every summand
    /// of the balance objective stays finite and short prefixes keep
    /// receiving gradient. Identical to [`log_dist`](Self::log_dist) when
    /// min_len is 0.
    fn log_dist_train(&self, condition: &TokenSequence, prefix: &[TokenId]) -> Vec<T> {
        masked_log_dist(
            self.logits(condition, prefix),
            prefix.len(),
            self.min_len(),
            self.max_len(),
            true,
        )
    }
}

/// Softmax with length masks applied. `lift_min_mask` keeps stop in support
/// below min_len (training view).
pub(crate) fn masked_log_dist<T: Scalar>(
    logits: Vec<T>,
    prefix_len: usize,
    min_len: usize,
    max_len: usize,
    lift_min_mask: bool,
) -> Vec<T> {
    let stop_id = logits.len() - 1;
    if prefix_len >= max_len {
        let mut out = vec![T::neg_infinity(); logits.len()];
        out[stop_id] = T::zero();
        return out;
    }
    let stop_allowed = lift_min_mask || prefix_len >= min_len;
    let allowed: Vec<T> = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != stop_id || stop_allowed)
        .map(|(_, &l)| l)
        .collect();
    let lse = log_sum_exp(&allowed);
    if lse == T::neg_infinity() {
        // No support left; unreachable for smoothed teachers.
        let n = allowed.len();
        let u = (T::one() / fp::<T>(n as f64)).ln();
        return logits
            .iter()
            .enumerate()
            .map(|(i, _)| {
                if i == stop_id && !stop_allowed {
                    T::neg_infinity()
                } else {
                    u
                }
            })
            .collect();
    }
    logits
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            if i == stop_id && !stop_allowed {
                T::neg_infinity()
            } else {
                l - lse
            }
        })
        .collect()
}

/// Teacher conditionals plus a one-hidden-layer tanh adjustment on logits.
#[derive(Debug, Clone)]
pub struct DeltaPolicy<T: Scalar> {
    teacher: Arc<TabularLm<T>>,
    cfg: PolicyConfig,
    params: Vec<T>,
}

// Flat parameter layout: W1 (hidden x in), b1 (hidden), W2 (out x hidden),
// b2 (out), where in = context_window * (|V|+1) and out = |V|+1.
struct Layout {
    input: usize,
    hidden: usize,
    out: usize,
}

impl Layout {
    fn of(cfg: &PolicyConfig, vocab: &Vocabulary) -> Self {
        Self {
            input: cfg.context_window * (vocab.size() + 1),
            hidden: cfg.hidden,
            out: vocab.size() + 1,
        }
    }

    fn total(&self) -> usize {
        self.hidden * self.input + self.hidden + self.out * self.hidden + self.out
    }

    fn w1(&self, j: usize, i: usize) -> usize {
        j * self.input + i
    }

    fn b1(&self, j: usize) -> usize {
        self.hidden * self.input + j
    }

    fn w2(&self, o: usize, j: usize) -> usize {
        self.hidden * self.input + self.hidden + o * self.hidden + j
    }

    fn b2(&self, o: usize) -> usize {
        self.hidden * self.input + self.hidden + self.out * self.hidden + o
    }
}

impl<T: Scalar> DeltaPolicy<T> {
    /// Policy with all adjustment parameters at zero: an exact copy of the
    /// teacher within the length masks.
    pub fn zeros(teacher: Arc<TabularLm<T>>, cfg: PolicyConfig) -> Result<Self, PolicyError> {
        if cfg.min_len > cfg.max_len {
            return Err(PolicyError::BadBounds);
        }
        let n = Layout::of(&cfg, teacher.vocab()).total();
        Ok(Self {
            teacher,
            cfg,
            params: vec![T::zero(); n],
        })
    }

    /// Trainable initialization: small random first layer, zero output
    /// layer. The output delta is identically zero, so conditionals still
    /// match the teacher exactly, but gradients reach every weight.
    pub fn init(
        teacher: Arc<TabularLm<T>>,
        cfg: PolicyConfig,
        rng: &mut impl Rng,
    ) -> Result<Self, PolicyError> {
        let scale = fp::<T>(0.5 / (cfg.context_window as f64).sqrt());
        Self::init_with_scale(teacher, cfg, scale, rng)
    }

    /// Like [`init`](Self::init) with an explicit first-layer weight range.
    /// Larger scales start the hidden features deeper in the nonlinear
    /// regime, which raises their rank over the state space; the output
    /// delta stays identically zero either way.
    pub fn init_with_scale(
        teacher: Arc<TabularLm<T>>,
        cfg: PolicyConfig,
        scale: T,
        rng: &mut impl Rng,
    ) -> Result<Self, PolicyError> {
        let mut policy = Self::zeros(teacher, cfg)?;
        let layout = policy.layout();
        let bound = scale.to_f64().unwrap_or(0.5);
        for j in 0..layout.hidden {
            for i in 0..layout.input {
                policy.params[layout.w1(j, i)] = fp::<T>(rng.gen_range(-bound..bound));
            }
            policy.params[layout.b1(j)] = fp::<T>(rng.gen_range(-bound..bound));
        }
        Ok(policy)
    }

    pub fn with_params(
        teacher: Arc<TabularLm<T>>,
        cfg: PolicyConfig,
        params: Vec<T>,
    ) -> Result<Self, PolicyError> {
        let mut policy = Self::zeros(teacher, cfg)?;
        if params.len() != policy.params.len() {
            return Err(PolicyError::ParamLen {
                got: params.len(),
                want: policy.params.len(),
            });
        }
        policy.params = params;
        Ok(policy)
    }

    fn layout(&self) -> Layout {
        Layout::of(&self.cfg, self.teacher.vocab())
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.cfg
    }

    pub fn teacher(&self) -> &TabularLm<T> {
        &self.teacher
    }

    pub fn teacher_ref(&self) -> Arc<TabularLm<T>> {
        Arc::clone(&self.teacher)
    }

    /// Same parameters riding on a different teacher (used between EM
    /// rounds).
    pub fn reteach(&self, teacher: Arc<TabularLm<T>>) -> Result<Self, PolicyError> {
        Self::with_params(teacher, self.cfg.clone(), self.params.clone())
    }

    /// One-hot slot symbols for the trailing window of condition + prefix.
    /// Returns, per slot, the active input index within that slot's block.
    fn window_symbols(&self, condition: &[TokenId], prefix: &[TokenId]) -> Vec<usize> {
        let v = self.teacher.vocab().size();
        let k = self.cfg.context_window;
        let total = condition.len() + prefix.len();
        let sym_at = |pos: usize| -> usize {
            if pos < condition.len() {
                condition[pos]
            } else {
                prefix[pos - condition.len()]
            }
        };
        (0..k)
            .map(|s| {
                let back = k - s;
                if total >= back {
                    sym_at(total - back)
                } else {
                    v // BOS slot
                }
            })
            .collect()
    }

    /// Adjustment network output (the logit delta) on plain scalars.
    fn delta(&self, condition: &[TokenId], prefix: &[TokenId]) -> Vec<T> {
        let layout = self.layout();
        let symbols = self.window_symbols(condition, prefix);
        let width = self.teacher.vocab().size() + 1;
        let mut hidden = Vec::with_capacity(layout.hidden);
        for j in 0..layout.hidden {
            let mut pre = self.params[layout.b1(j)];
            for (s, &sym) in symbols.iter().enumerate() {
                pre = pre + self.params[layout.w1(j, s * width + sym)];
            }
            hidden.push(pre.tanh());
        }
        (0..layout.out)
            .map(|o| {
                let mut acc = self.params[layout.b2(o)];
                for (j, &h) in hidden.iter().enumerate() {
                    acc = acc + self.params[layout.w2(o, j)] * h;
                }
                acc
            })
            .collect()
    }

    /// Reverse-mode gradient of a scalar loss closure with respect to the
    /// flat parameter vector.
    pub fn grad<F>(&self, f: F) -> Result<GradientTape<T>, PolicyError>
    where
        F: FnOnce(&mut TapeEval<'_, T>) -> Result<Var<T>, PolicyError>,
    {
        let mut eval = TapeEval::new(self);
        let loss = f(&mut eval)?;
        let value = loss.value();
        if !value.is_finite() {
            return Err(PolicyError::NonFiniteLoss);
        }
        let grads = loss.backward();
        let grad: Vec<T> = eval.params.iter().map(|p| grads.get(p)).collect();
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(PolicyError::NonFiniteGradient);
        }
        Ok(GradientTape { loss: value, grad })
    }

    /// Versioned checkpoint with the parameter vector in raw-bit hex so
    /// reloads are bit-exact.
    pub fn write_checkpoint(&self) -> String {
        let mut out = String::new();
        out.push_str("seqflow-policy v1\n");
        out.push_str(&format!("scalar {}\n", T::BITS));
        out.push_str(&format!("context_window {}\n", self.cfg.context_window));
        out.push_str(&format!("hidden {}\n", self.cfg.hidden));
        out.push_str(&format!("min_len {}\n", self.cfg.min_len));
        out.push_str(&format!("max_len {}\n", self.cfg.max_len));
        out.push_str(&format!(
            "teacher_checksum {}\n",
            checksum(&self.teacher.write_checkpoint())
        ));
        out.push_str(&format!("params {}\n", self.params.len()));
        for p in &self.params {
            out.push_str(&p.encode_bits());
            out.push('\n');
        }
        out.push_str("end\n");
        out
    }

    pub fn read_checkpoint(
        text: &str,
        teacher: Arc<TabularLm<T>>,
    ) -> Result<Self, PolicyError> {
        let bad = |msg: &str| PolicyError::Checkpoint(msg.to_string());
        let mut lines = text.lines();
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| bad(&format!("missing {what} line")))
        };
        if next("header")? != "seqflow-policy v1" {
            return Err(bad("unsupported header"));
        }
        let field = |line: &str, key: &str| -> Result<String, PolicyError> {
            line.strip_prefix(&format!("{key} "))
                .map(str::to_string)
                .ok_or_else(|| bad(key))
        };
        let bits: u32 = field(next("scalar")?, "scalar")?
            .parse()
            .map_err(|_| bad("scalar"))?;
        if bits != T::BITS {
            return Err(bad("scalar width mismatch"));
        }
        let cfg = PolicyConfig {
            context_window: field(next("context_window")?, "context_window")?
                .parse()
                .map_err(|_| bad("context_window"))?,
            hidden: field(next("hidden")?, "hidden")?
                .parse()
                .map_err(|_| bad("hidden"))?,
            min_len: field(next("min_len")?, "min_len")?
                .parse()
                .map_err(|_| bad("min_len"))?,
            max_len: field(next("max_len")?, "max_len")?
                .parse()
                .map_err(|_| bad("max_len"))?,
        };
        let want = checksum(&teacher.write_checkpoint());
        let got = field(next("teacher_checksum")?, "teacher_checksum")?;
        if got != want {
            return Err(PolicyError::TeacherMismatch { got, want });
        }
        let count: usize = field(next("params")?, "params")?
            .parse()
            .map_err(|_| bad("params"))?;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            params.push(T::decode_bits(next("param")?).ok_or_else(|| bad("param value"))?);
        }
        if next("end")? != "end" {
            return Err(bad("missing end marker"));
        }
        Self::with_params(teacher, cfg, params)
    }
}

impl<T: Scalar> PolicyDist<T> for DeltaPolicy<T> {
    fn vocab(&self) -> &Vocabulary {
        self.teacher.vocab()
    }

    fn min_len(&self) -> usize {
        self.cfg.min_len
    }

    fn max_len(&self) -> usize {
        self.cfg.max_len
    }

    fn logits(&self, condition: &TokenSequence, prefix: &[TokenId]) -> Vec<T> {
        let mut full = condition.ids().to_vec();
        full.extend_from_slice(prefix);
        let teacher_lp = self.teacher.cond_logprobs_ids(&full);
        let delta = self.delta(condition.ids(), prefix);
        teacher_lp
            .iter()
            .zip(&delta)
            .map(|(&t, &d)| t + d)
            .collect()
    }
}

/// Loss value and gradient aligned with the policy parameter vector.
#[derive(Debug, Clone)]
pub struct GradientTape<T: Scalar> {
    pub loss: T,
    pub grad: Vec<T>,
}

/// Distributions of one state materialized on the tape.
pub struct StateVars<T: Scalar> {
    /// Masked view (what sampling uses).
    pub sampled: Vec<Var<T>>,
    /// Training view: min-length stop mask lifted.
    pub train: Vec<Var<T>>,
}

type StateKey = (Vec<TokenId>, usize, usize);

/// One loss evaluation: the tape, parameter leaves, and a per-state cache so
/// repeated states share nodes (and therefore gradients).
pub struct TapeEval<'a, T: Scalar> {
    policy: &'a DeltaPolicy<T>,
    pub tape: Tape<T>,
    params: Vec<Var<T>>,
    cache: HashMap<StateKey, Rc<StateVars<T>>>,
}

impl<'a, T: Scalar> TapeEval<'a, T> {
    fn new(policy: &'a DeltaPolicy<T>) -> Self {
        let tape = Tape::new();
        let params = policy.params.iter().map(|&p| tape.var(p)).collect();
        Self {
            policy,
            tape,
            params,
            cache: HashMap::new(),
        }
    }

    pub fn policy(&self) -> &DeltaPolicy<T> {
        self.policy
    }

    fn state_key(&self, condition: &TokenSequence, prefix: &[TokenId]) -> StateKey {
        let mut full = condition.ids().to_vec();
        full.extend_from_slice(prefix);
        let keep = self
            .policy
            .teacher
            .order()
            .max(self.policy.cfg.context_window)
            .min(full.len());
        let tail = full[full.len() - keep..].to_vec();
        (tail, full.len(), prefix.len())
    }

    /// Tape forward pass for one state, cached by its observable context.
    pub fn state(&mut self, condition: &TokenSequence, prefix: &[TokenId]) -> Rc<StateVars<T>> {
        let key = self.state_key(condition, prefix);
        if let Some(hit) = self.cache.get(&key) {
            return Rc::clone(hit);
        }
        let built = Rc::new(self.forward(condition, prefix));
        self.cache.insert(key, Rc::clone(&built));
        built
    }

    fn forward(&mut self, condition: &TokenSequence, prefix: &[TokenId]) -> StateVars<T> {
        let policy = self.policy;
        let layout = policy.layout();
        let vocab_size = policy.teacher.vocab().size();
        let stop_id = vocab_size;
        let n_events = vocab_size + 1;

        let mut full = condition.ids().to_vec();
        full.extend_from_slice(prefix);
        let teacher_lp = policy.teacher.cond_logprobs_ids(&full);

        // At max_len the distribution is a stop point mass independent of
        // parameters.
        if prefix.len() >= policy.cfg.max_len {
            let frozen: Vec<Var<T>> = (0..n_events)
                .map(|i| {
                    self.tape.constant(if i == stop_id {
                        T::zero()
                    } else {
                        T::neg_infinity()
                    })
                })
                .collect();
            return StateVars {
                sampled: frozen.iter().cloned().collect(),
                train: frozen,
            };
        }

        let symbols = policy.window_symbols(condition.ids(), prefix);
        let width = n_events;
        let mut hidden = Vec::with_capacity(layout.hidden);
        for j in 0..layout.hidden {
            let mut pre = self.params[layout.b1(j)].clone();
            for (s, &sym) in symbols.iter().enumerate() {
                pre = pre + self.params[layout.w1(j, s * width + sym)].clone();
            }
            hidden.push(pre.tanh());
        }
        let mut logits = Vec::with_capacity(n_events);
        for o in 0..n_events {
            let mut acc = self.params[layout.b2(o)].clone();
            for (j, h) in hidden.iter().enumerate() {
                acc = acc + self.params[layout.w2(o, j)].clone() * h.clone();
            }
            logits.push(acc + teacher_lp[o]);
        }

        let stop_allowed = prefix.len() >= policy.cfg.min_len;
        let token_logits = &logits[..vocab_size];
        let lse_train = self.tape.log_sum_exp(&logits);
        let train: Vec<Var<T>> = logits
            .iter()
            .map(|l| l.clone() - lse_train.clone())
            .collect();
        let sampled = if stop_allowed {
            train.clone()
        } else {
            let lse = self.tape.log_sum_exp(token_logits);
            logits
                .iter()
                .enumerate()
                .map(|(i, l)| {
                    if i == stop_id {
                        self.tape.constant(T::neg_infinity())
                    } else {
                        l.clone() - lse.clone()
                    }
                })
                .collect()
        };
        StateVars { sampled, train }
    }

    /// log q(stop-terminated z | condition) under the masked policy, on the
    /// tape. Environment-forced steps contribute probability 1; returns None
    /// when z is unreachable (probability 0).
    pub fn terminal_log_prob(
        &mut self,
        condition: &TokenSequence,
        z: &TokenSequence,
        env: &dyn Environment,
    ) -> Option<Var<T>> {
        let decisions = env_decisions(self.policy.teacher.vocab(), z, env)?;
        if z.len() > self.policy.cfg.max_len {
            return None;
        }
        let mut terms: Vec<Var<T>> = Vec::new();
        for (i, decision) in decisions.iter().enumerate() {
            match decision {
                EnvDecision::Force(_) | EnvDecision::Reject => {
                    // probability-1 environment transition
                }
                EnvDecision::Free => {
                    let state = self.state(condition, &z.ids()[..i]);
                    let event = if i < z.len() { z.ids()[i] } else { self.policy.vocab().stop_id() };
                    let lp = state.sampled[event].clone();
                    if lp.value() == T::neg_infinity() {
                        return None;
                    }
                    terms.push(lp);
                }
            }
        }
        Some(self.tape.sum(&terms))
    }
}

/// Per-prefix environment decisions along a terminated sequence, or None if
/// the sequence is inconsistent with the environment (probability zero).
///
/// The returned vector has length `z.len() + 1`; the last entry describes
/// the termination event.
pub fn env_decisions(
    vocab: &Vocabulary,
    z: &TokenSequence,
    env: &dyn Environment,
) -> Option<Vec<EnvDecision>> {
    let mut out = Vec::with_capacity(z.len() + 1);
    for i in 0..=z.len() {
        let decision = env.decide(vocab, &z.ids()[..i]);
        match decision {
            EnvDecision::Free => {}
            EnvDecision::Force(t) => {
                // cannot stop, and cannot emit anything but t, mid-force
                if i == z.len() || z.ids()[i] != t {
                    return None;
                }
            }
            EnvDecision::Reject => {
                // rejection terminates the trajectory on the spot
                if i != z.len() {
                    return None;
                }
            }
        }
        out.push(decision);
    }
    Some(out)
}

/// Draws one trajectory. Tokens are sampled from the tempered, masked
/// behavior distribution; the recorded log-probabilities are always the
/// untempered policy values. `temperature = 0` means argmax.
pub fn sample_sequence<T: Scalar, P: PolicyDist<T> + ?Sized>(
    policy: &P,
    condition: &TokenSequence,
    temperature: T,
    rng: &mut impl Rng,
    env: &dyn Environment,
    source: TrajectorySource,
) -> Trajectory<T> {
    let vocab_size = policy.vocab().size();
    let stop_id = vocab_size;
    let mut seq = TokenSequence::empty();
    let mut step_logprobs = Vec::new();
    let mut stop_logprobs = Vec::new();
    loop {
        match env.decide(policy.vocab(), seq.ids()) {
            EnvDecision::Force(t) => {
                stop_logprobs.push(T::neg_infinity());
                step_logprobs.push(T::zero());
                seq.push(t);
                continue;
            }
            EnvDecision::Reject => {
                stop_logprobs.push(T::zero());
                seq.terminate();
                break;
            }
            EnvDecision::Free => {}
        }
        let log_dist = policy.log_dist(condition, seq.ids());
        stop_logprobs.push(log_dist[stop_id]);
        let logits = policy.logits(condition, seq.ids());
        let choice = sample_masked(
            &logits,
            seq.len(),
            policy.min_len(),
            policy.max_len(),
            temperature,
            rng,
        );
        if choice == stop_id {
            seq.terminate();
            break;
        }
        step_logprobs.push(log_dist[choice]);
        seq.push(choice);
    }
    Trajectory {
        sequence: seq,
        step_logprobs,
        stop_logprobs,
        source,
    }
}

/// Tempered masked draw from raw logits; masks are applied after tempering.
fn sample_masked<T: Scalar>(
    logits: &[T],
    prefix_len: usize,
    min_len: usize,
    max_len: usize,
    temperature: T,
    rng: &mut impl Rng,
) -> usize {
    let stop_id = logits.len() - 1;
    if prefix_len >= max_len {
        return stop_id;
    }
    let stop_allowed = prefix_len >= min_len;
    let allowed = |i: usize| i != stop_id || stop_allowed;
    if temperature == T::zero() {
        // zero-temperature limit: argmax over the allowed set
        let mut best = usize::MAX;
        let mut best_val = T::neg_infinity();
        for (i, &l) in logits.iter().enumerate() {
            if allowed(i) && (best == usize::MAX || l > best_val) {
                best = i;
                best_val = l;
            }
        }
        return best;
    }
    let tempered: Vec<T> = logits.iter().map(|&l| l / temperature).collect();
    let dist = masked_log_dist(tempered, prefix_len, min_len, max_len, false);
    let u: f64 = rng.gen();
    let mut acc = 0.0f64;
    let mut last_allowed = stop_id;
    for (i, lp) in dist.iter().enumerate() {
        if !allowed(i) {
            continue;
        }
        last_allowed = i;
        acc += lp.exp().to_f64().unwrap_or(0.0);
        if u < acc {
            return i;
        }
    }
    last_allowed
}

/// log q(z with stop | condition) under the masked policy. -inf for
/// unreachable sequences (length bounds or environment inconsistency).
pub fn terminal_log_prob<T: Scalar, P: PolicyDist<T> + ?Sized>(
    policy: &P,
    condition: &TokenSequence,
    z: &TokenSequence,
    env: &dyn Environment,
) -> T {
    let Some(decisions) = env_decisions(policy.vocab(), z, env) else {
        return T::neg_infinity();
    };
    if z.len() > policy.max_len() {
        return T::neg_infinity();
    }
    let stop_id = policy.vocab().stop_id();
    let mut total = T::zero();
    for (i, decision) in decisions.iter().enumerate() {
        if *decision != EnvDecision::Free {
            continue;
        }
        let dist = policy.log_dist(condition, &z.ids()[..i]);
        let event = if i < z.len() { z.ids()[i] } else { stop_id };
        total = total + dist[event];
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seq::FreeEnv;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab(tokens: &[&str]) -> Arc<Vocabulary> {
        Arc::new(Vocabulary::new(tokens.iter().copied()).unwrap())
    }

    fn skewed_teacher() -> Arc<TabularLm<f64>> {
        let v = vocab(&["a", "b"]);
        let corpus: Vec<TokenSequence> = ["a a", "a b", "b", "a", "a a a"]
            .iter()
            .map(|l| v.parse_seq(l).unwrap())
            .collect();
        Arc::new(TabularLm::fit_ngram(v, &corpus, 2, 0.3).unwrap())
    }

    fn uniform_teacher(tokens: &[&str]) -> Arc<TabularLm<f64>> {
        let v = vocab(tokens);
        Arc::new(TabularLm::fit_ngram(v, &[], 1, 1.0).unwrap())
    }

    #[test]
    fn zero_params_match_teacher_exactly() {
        let teacher = skewed_teacher();
        let cfg = PolicyConfig {
            min_len: 0,
            max_len: 10,
            ..PolicyConfig::default()
        };
        let policy = DeltaPolicy::zeros(Arc::clone(&teacher), cfg).unwrap();
        let cond = TokenSequence::empty();
        for prefix in [vec![], vec![0], vec![0, 1], vec![1, 0, 0]] {
            let got = policy.log_dist(&cond, &prefix);
            let want = teacher.cond_logprobs_ids(&prefix);
            for (g, w) in got.iter().zip(&want) {
                if w.is_finite() {
                    assert!((g - w).abs() < 1e-12, "{g} vs {w}");
                } else {
                    assert_eq!(g, w);
                }
            }
        }
    }

    #[test]
    fn random_init_keeps_identity() {
        let teacher = skewed_teacher();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let policy = DeltaPolicy::init(
            Arc::clone(&teacher),
            PolicyConfig::default(),
            &mut rng,
        )
        .unwrap();
        let got = policy.log_dist(&TokenSequence::empty(), &[0]);
        let want = teacher.cond_logprobs_ids(&[0]);
        for (g, w) in got.iter().zip(&want) {
            if w.is_finite() {
                assert!((g - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn min_len_masks_stop() {
        let teacher = uniform_teacher(&["a", "b"]);
        let cfg = PolicyConfig {
            min_len: 2,
            max_len: 4,
            ..PolicyConfig::default()
        };
        let policy = DeltaPolicy::zeros(teacher, cfg).unwrap();
        let cond = TokenSequence::empty();
        let dist = policy.log_dist(&cond, &[0]);
        assert_eq!(dist[2].exp(), 0.0);
        let total: f64 = dist.iter().map(|lp| lp.exp()).sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-9);
        // training view keeps stop in support
        let train = policy.log_dist_train(&cond, &[0]);
        assert!(train[2].is_finite());
    }

    #[test]
    fn max_len_forces_stop() {
        let teacher = uniform_teacher(&["a", "b"]);
        let cfg = PolicyConfig {
            min_len: 0,
            max_len: 2,
            ..PolicyConfig::default()
        };
        let policy = DeltaPolicy::zeros(teacher, cfg).unwrap();
        let dist = policy.log_dist(&TokenSequence::empty(), &[0, 1]);
        assert_eq!(dist[2], 0.0);
        assert_eq!(dist[0], f64::NEG_INFINITY);
    }

    #[test]
    fn normalization_at_many_random_states() {
        let teacher = skewed_teacher();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let policy = DeltaPolicy::init(
            Arc::clone(&teacher),
            PolicyConfig {
                min_len: 1,
                max_len: 6,
                ..PolicyConfig::default()
            },
            &mut rng,
        )
        .unwrap();
        let cond = TokenSequence::empty();
        for _ in 0..200 {
            let len = rng.gen_range(0..6);
            let prefix: Vec<usize> = (0..len).map(|_| rng.gen_range(0..2)).collect();
            let dist = policy.log_dist(&cond, &prefix);
            let total: f64 = dist.iter().map(|lp| lp.exp()).sum();
            assert_abs_diff_eq!(total, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn terminal_log_prob_uniform_symmetry() {
        let teacher = uniform_teacher(&["a", "b"]);
        let cfg = PolicyConfig {
            min_len: 0,
            max_len: 8,
            ..PolicyConfig::default()
        };
        let policy = DeltaPolicy::zeros(Arc::clone(&teacher), cfg).unwrap();
        let z = TokenSequence::terminated_from(vec![0]);
        let lp = terminal_log_prob(&policy, &TokenSequence::empty(), &z, &FreeEnv);
        assert_abs_diff_eq!(lp, 2.0 * (1.0f64 / 3.0).ln(), epsilon = 1e-12);

        // below min_len: unreachable
        let strict = DeltaPolicy::zeros(
            teacher,
            PolicyConfig {
                min_len: 2,
                max_len: 8,
                ..PolicyConfig::default()
            },
        )
        .unwrap();
        assert_eq!(
            terminal_log_prob(&strict, &TokenSequence::empty(), &z, &FreeEnv),
            f64::NEG_INFINITY
        );
    }

    #[test]
    fn zero_param_terminal_matches_teacher() {
        let teacher = skewed_teacher();
        let policy = DeltaPolicy::zeros(
            Arc::clone(&teacher),
            PolicyConfig {
                min_len: 0,
                max_len: 16,
                ..PolicyConfig::default()
            },
        )
        .unwrap();
        let v = teacher.vocab();
        for line in ["a <STOP>", "a b <STOP>", "<STOP>", "b a a <STOP>"] {
            let z = v.parse_seq(line).unwrap();
            let lp = terminal_log_prob(&policy, &TokenSequence::empty(), &z, &FreeEnv);
            assert_abs_diff_eq!(
                lp,
                teacher.log_prob_seq(&z).unwrap(),
                epsilon = 1e-11
            );
        }
    }

    #[test]
    fn sampling_is_deterministic_given_seed() {
        let teacher = skewed_teacher();
        let policy = DeltaPolicy::zeros(
            teacher,
            PolicyConfig {
                min_len: 0,
                max_len: 6,
                ..PolicyConfig::default()
            },
        )
        .unwrap();
        let cond = TokenSequence::empty();
        let draw = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample_sequence(
                &policy,
                &cond,
                1.0,
                &mut rng,
                &FreeEnv,
                TrajectorySource::OnPolicy,
            )
        };
        let (a, b) = (draw(42), draw(42));
        assert_eq!(a.sequence, b.sequence);
        assert_eq!(a.step_logprobs, b.step_logprobs);
        assert_eq!(a.stop_logprobs, b.stop_logprobs);
        assert!(a.shape_ok());
    }

    #[test]
    fn zero_temperature_is_greedy_and_argmax_invariant() {
        let teacher = skewed_teacher();
        let policy = DeltaPolicy::zeros(
            teacher,
            PolicyConfig {
                min_len: 0,
                max_len: 4,
                ..PolicyConfig::default()
            },
        )
        .unwrap();
        let cond = TokenSequence::empty();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let greedy = sample_sequence(
            &policy,
            &cond,
            0.0,
            &mut rng,
            &FreeEnv,
            TrajectorySource::OnPolicy,
        );
        // argmax at every visited state must match the trajectory
        let mut prefix = Vec::new();
        for &id in greedy.sequence.ids() {
            let dist = policy.log_dist(&cond, &prefix);
            let argmax = dist
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(argmax, id);
            prefix.push(id);
        }
        // temperature scaling preserves the argmax at every state
        let logits = policy.logits(&cond, &[]);
        let argmax = |xs: &[f64]| {
            xs.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0
        };
        let base = argmax(&logits);
        for t in [0.25, 0.5, 2.0, 7.5] {
            let scaled: Vec<f64> = logits.iter().map(|l| l / t).collect();
            assert_eq!(argmax(&scaled), base);
        }
    }

    #[test]
    fn sampled_frequencies_match_enumeration() {
        // uniform teacher |V|=2, max_len 1: terminals {empty, a, b} each 1/3
        let teacher = uniform_teacher(&["a", "b"]);
        let policy = DeltaPolicy::zeros(
            teacher,
            PolicyConfig {
                min_len: 0,
                max_len: 1,
                ..PolicyConfig::default()
            },
        )
        .unwrap();
        let cond = TokenSequence::empty();
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let n = 10_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            let t = sample_sequence(
                &policy,
                &cond,
                1.0,
                &mut rng,
                &FreeEnv,
                TrajectorySource::OnPolicy,
            );
            match t.sequence.ids() {
                [] => counts[0] += 1,
                [0] => counts[1] += 1,
                [1] => counts[2] += 1,
                _ => panic!("impossible terminal"),
            }
        }
        let p = 1.0 / 3.0;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!(
                (c as f64 - n as f64 * p).abs() < 3.0 * sigma,
                "count {c} outside 3 sigma"
            );
        }
    }

    #[test]
    fn tempered_sampling_records_untempered_logprobs() {
        let teacher = skewed_teacher();
        let policy = DeltaPolicy::zeros(
            teacher,
            PolicyConfig {
                min_len: 0,
                max_len: 5,
                ..PolicyConfig::default()
            },
        )
        .unwrap();
        let cond = TokenSequence::empty();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = sample_sequence(
            &policy,
            &cond,
            1.7,
            &mut rng,
            &FreeEnv,
            TrajectorySource::Tempered,
        );
        let mut prefix = Vec::new();
        for (i, &id) in t.sequence.ids().iter().enumerate() {
            let dist = policy.log_dist(&cond, &prefix);
            assert_eq!(t.step_logprobs[i], dist[id]);
            assert_eq!(t.stop_logprobs[i], dist[2]);
            prefix.push(id);
        }
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let teacher = skewed_teacher();
        let policy = DeltaPolicy::zeros(teacher, PolicyConfig::default()).unwrap();
        let tape_out = policy
            .grad(|eval| Ok(eval.tape.constant(3.5)))
            .unwrap();
        assert_eq!(tape_out.loss, 3.5);
        assert!(tape_out.grad.iter().all(|&g| g == 0.0));
        assert_eq!(tape_out.grad.len(), policy.param_count());
    }

    #[test]
    fn tape_distributions_match_plain_forward() {
        let teacher = skewed_teacher();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut policy = DeltaPolicy::init(
            Arc::clone(&teacher),
            PolicyConfig {
                min_len: 1,
                max_len: 5,
                ..PolicyConfig::default()
            },
            &mut rng,
        )
        .unwrap();
        // make the output layer nonzero too
        for p in policy.params_mut().iter_mut() {
            if *p == 0.0 {
                *p = 0.01;
            }
        }
        let cond = TokenSequence::from_ids(vec![1]);
        for prefix in [vec![], vec![0], vec![0, 1, 1]] {
            let plain_masked = policy.log_dist(&cond, &prefix);
            let plain_train = policy.log_dist_train(&cond, &prefix);
            policy
                .grad(|eval| {
                    let state = eval.state(&cond, &prefix);
                    for (var, want) in state.sampled.iter().zip(&plain_masked) {
                        if want.is_finite() {
                            assert!((var.value() - *want).abs() < 1e-12);
                        } else {
                            assert_eq!(var.value(), *want);
                        }
                    }
                    for (var, want) in state.train.iter().zip(&plain_train) {
                        assert!((var.value() - *want).abs() < 1e-12);
                    }
                    Ok(eval.tape.constant(0.0))
                })
                .unwrap();
        }
    }

    #[test]
    fn gradient_matches_central_finite_differences() {
        let teacher = skewed_teacher();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mut policy = DeltaPolicy::init(
            Arc::clone(&teacher),
            PolicyConfig {
                context_window: 2,
                hidden: 6,
                min_len: 0,
                max_len: 4,
            },
            &mut rng,
        )
        .unwrap();
        for p in policy.params_mut().iter_mut() {
            *p += rng.gen_range(-0.05..0.05);
        }
        let cond = TokenSequence::empty();
        let z = TokenSequence::terminated_from(vec![0, 1]);

        let loss_of = |p: &DeltaPolicy<f64>| -> f64 {
            -terminal_log_prob(p, &cond, &z, &FreeEnv)
        };
        let tape_out = policy
            .grad(|eval| {
                let lp = eval.terminal_log_prob(&cond, &z, &FreeEnv).unwrap();
                Ok(-lp)
            })
            .unwrap();
        assert_abs_diff_eq!(tape_out.loss, loss_of(&policy), epsilon = 1e-12);

        let h = 1e-5;
        for idx in (0..policy.param_count()).step_by(7) {
            let mut plus = policy.clone();
            plus.params_mut()[idx] += h;
            let mut minus = policy.clone();
            minus.params_mut()[idx] -= h;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            let an = tape_out.grad[idx];
            let denom = fd.abs().max(an.abs()).max(1e-8);
            assert!(
                ((an - fd) / denom).abs() < 1e-4,
                "param {idx}: analytic {an} vs fd {fd}"
            );
        }
    }

    #[test]
    fn symmetric_slots_receive_equal_gradients() {
        // Symmetric teacher over {a, b}: gradients of -log q(stop-terminated
        // [a]) and [b] are mirror images under swapping a and b output rows.
        let teacher = uniform_teacher(&["a", "b"]);
        let policy = DeltaPolicy::zeros(
            Arc::clone(&teacher),
            PolicyConfig {
                context_window: 1,
                hidden: 4,
                min_len: 0,
                max_len: 2,
            },
        )
        .unwrap();
        let cond = TokenSequence::empty();
        let grad_for = |tok: usize| {
            policy
                .grad(|eval| {
                    let z = TokenSequence::terminated_from(vec![tok]);
                    let lp = eval.terminal_log_prob(&cond, &z, &FreeEnv).unwrap();
                    Ok(-lp)
                })
                .unwrap()
        };
        let ga = grad_for(0);
        let gb = grad_for(1);
        let layout = Layout::of(policy.config(), teacher.vocab());
        for j in 0..layout.hidden {
            // output rows for token a and b swap roles between the two losses
            assert_abs_diff_eq!(
                ga.grad[layout.w2(0, j)],
                gb.grad[layout.w2(1, j)],
                epsilon = 1e-12
            );
            assert_abs_diff_eq!(
                ga.grad[layout.w2(1, j)],
                gb.grad[layout.w2(0, j)],
                epsilon = 1e-12
            );
        }
        assert_abs_diff_eq!(ga.loss, gb.loss, epsilon = 1e-12);
    }

    #[test]
    fn checkpoint_round_trip_and_checksum_guard() {
        let teacher = skewed_teacher();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let policy = DeltaPolicy::init(
            Arc::clone(&teacher),
            PolicyConfig::default(),
            &mut rng,
        )
        .unwrap();
        let text = policy.write_checkpoint();
        let reloaded =
            DeltaPolicy::read_checkpoint(&text, Arc::clone(&teacher)).unwrap();
        assert_eq!(policy.params(), reloaded.params());
        assert_eq!(text, reloaded.write_checkpoint());

        let other = uniform_teacher(&["a", "b"]);
        assert!(matches!(
            DeltaPolicy::read_checkpoint(&text, other),
            Err(PolicyError::TeacherMismatch { .. })
        ));
    }
}
