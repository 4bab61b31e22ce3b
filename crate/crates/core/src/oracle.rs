//! Brute-force ground truth: exact terminal distributions, divergences,
//! marginal likelihoods, and exact-posterior conditional tables.
//!
//! Everything here enumerates the finite sequence space in shortlex order
//! and accumulates probability in log space with pairwise-balanced sums, so
//! oracle outputs are byte-stable across runs.

use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

use crate::lm::{LmError, TabularLm};
use crate::objective::RewardFn;
use crate::policy::{env_decisions, terminal_log_prob, PolicyDist};
use crate::scalar::{log_sum_exp, Scalar};
use crate::seq::{concat, EnvDecision, Environment, SeqError, TokenId, TokenSequence, VocabRef, Vocabulary};

/// Default ceiling on enumerated sequence counts.
pub const DEFAULT_ENUMERATION_CAP: usize = 2_000_000;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("enumeration needs {needed} sequences, cap is {cap}")]
    CapExceeded { needed: u128, cap: usize },
    #[error("all rewards are zero over the enumerated space")]
    AllRewardsZero,
    #[error("support violation: p has mass where q does not")]
    SupportViolation,
    #[error("min_len must not exceed max_len")]
    BadBounds,
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Seq(#[from] SeqError),
}

/// Number of sequences with lengths in [min_len, max_len].
pub fn space_size(vocab_size: usize, min_len: usize, max_len: usize) -> u128 {
    let mut total: u128 = 0;
    let v = vocab_size as u128;
    for len in min_len..=max_len {
        let mut count: u128 = 1;
        for _ in 0..len {
            count = count.saturating_mul(v);
        }
        total = total.saturating_add(count);
    }
    total
}

/// Shortlex iterator over terminated sequences with lengths in
/// [min_len, max_len].
pub struct TerminalIter {
    vocab_size: usize,
    max_len: usize,
    /// next digits to emit; None once exhausted
    digits: Option<Vec<TokenId>>,
}

impl Iterator for TerminalIter {
    type Item = TokenSequence;

    fn next(&mut self) -> Option<TokenSequence> {
        let digits = self.digits.as_mut()?;
        let out = TokenSequence::terminated_from(digits.clone());
        // advance odometer, rolling over to the next length
        let mut pos = digits.len();
        loop {
            if pos == 0 {
                if digits.len() == self.max_len {
                    self.digits = None;
                } else {
                    let next_len = digits.len() + 1;
                    self.digits = Some(vec![0; next_len]);
                }
                break;
            }
            pos -= 1;
            if digits[pos] + 1 < self.vocab_size {
                digits[pos] += 1;
                for d in digits[pos + 1..].iter_mut() {
                    *d = 0;
                }
                break;
            }
        }
        Some(out)
    }
}

/// Every terminated sequence in the bounds exactly once, shortlex order.
pub fn enumerate_terminals(
    vocab: &Vocabulary,
    min_len: usize,
    max_len: usize,
    cap: usize,
) -> Result<TerminalIter, OracleError> {
    if min_len > max_len {
        return Err(OracleError::BadBounds);
    }
    let needed = space_size(vocab.size(), min_len, max_len);
    if needed > cap as u128 {
        return Err(OracleError::CapExceeded { needed, cap });
    }
    Ok(TerminalIter {
        vocab_size: vocab.size(),
        max_len,
        digits: Some(vec![0; min_len]),
    })
}

/// Sequence key ordered shortlex (length first, then lexicographic).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeqKey(pub Vec<TokenId>);

impl Ord for SeqKey {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.0.len(), &self.0).cmp(&(other.0.len(), &other.0))
    }
}

impl PartialOrd for SeqKey {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Exact probability table over terminated sequences.
#[derive(Debug, Clone)]
pub struct TerminalDistribution<T: Scalar> {
    entries: BTreeMap<SeqKey, T>,
    pub support_size: usize,
    /// log of the unnormalized mass the table was normalized by.
    pub log_partition: T,
}

impl<T: Scalar> TerminalDistribution<T> {
    fn from_log_weights(weights: Vec<(Vec<TokenId>, T)>) -> Result<Self, OracleError> {
        let logs: Vec<T> = weights.iter().map(|(_, w)| *w).collect();
        let log_partition = log_sum_exp(&logs);
        if log_partition == T::neg_infinity() {
            return Err(OracleError::AllRewardsZero);
        }
        let mut entries = BTreeMap::new();
        for (ids, lw) in weights {
            if lw == T::neg_infinity() {
                continue; // zero-probability terminals are pruned
            }
            entries.insert(SeqKey(ids), (lw - log_partition).exp());
        }
        let support_size = entries.len();
        Ok(Self {
            entries,
            support_size,
            log_partition,
        })
    }

    /// Empirical distribution of a sample set.
    pub fn from_samples<'a>(samples: impl IntoIterator<Item = &'a TokenSequence>) -> Self {
        let mut counts: BTreeMap<SeqKey, usize> = BTreeMap::new();
        let mut total = 0usize;
        for s in samples {
            *counts.entry(SeqKey(s.ids().to_vec())).or_insert(0) += 1;
            total += 1;
        }
        let entries: BTreeMap<SeqKey, T> = counts
            .into_iter()
            .map(|(k, c)| {
                (
                    k,
                    T::from_f64(c as f64 / total as f64).expect("count ratio"),
                )
            })
            .collect();
        let support_size = entries.len();
        Self {
            entries,
            support_size,
            log_partition: T::from_f64((total as f64).ln()).expect("ln total"),
        }
    }

    pub fn prob(&self, ids: &[TokenId]) -> T {
        self.entries
            .get(&SeqKey(ids.to_vec()))
            .copied()
            .unwrap_or_else(T::zero)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&[TokenId], T)> {
        self.entries.iter().map(|(k, &p)| (k.0.as_slice(), p))
    }

    pub fn total_mass(&self) -> T {
        self.entries.values().copied().sum()
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> T {
        self.entries
            .values()
            .filter(|p| **p > T::zero())
            .map(|&p| -(p * p.ln()))
            .sum()
    }

    /// Restriction to a support predicate, renormalized.
    pub fn restricted(&self, keep: impl Fn(&[TokenId]) -> bool) -> Self {
        let kept: Vec<(Vec<TokenId>, T)> = self
            .entries
            .iter()
            .filter(|(k, _)| keep(&k.0))
            .map(|(k, &p)| (k.0.clone(), p))
            .collect();
        let mass: T = kept.iter().map(|(_, p)| *p).sum();
        let entries: BTreeMap<SeqKey, T> = kept
            .into_iter()
            .map(|(ids, p)| (SeqKey(ids), p / mass))
            .collect();
        let support_size = entries.len();
        Self {
            entries,
            support_size,
            log_partition: self.log_partition + mass.ln(),
        }
    }

    /// Line-delimited (sequence, probability) dump sorted shortlex.
    pub fn dump(&self, vocab: &Vocabulary) -> String {
        let mut out = String::new();
        for (ids, p) in self.entries() {
            let seq = TokenSequence::terminated_from(ids.to_vec());
            out.push_str(&format!("{}\t{:?}\n", vocab.render(&seq), p));
        }
        out
    }
}

/// Normalized target distribution of a reward over the enumerated space.
pub fn exact_target<T: Scalar, R: RewardFn<T> + ?Sized>(
    reward: &R,
    vocab: &Vocabulary,
    min_len: usize,
    max_len: usize,
    cap: usize,
) -> Result<TerminalDistribution<T>, OracleError> {
    let weights: Vec<(Vec<TokenId>, T)> = enumerate_terminals(vocab, min_len, max_len, cap)?
        .map(|z| {
            let lw = reward.log_reward(&z);
            (z.ids().to_vec(), lw)
        })
        .collect();
    TerminalDistribution::from_log_weights(weights)
}

/// Exact terminal distribution of a masked policy, by enumerating every
/// positive-probability trajectory (environment transitions included).
pub fn exact_policy_terminal<T: Scalar, P: PolicyDist<T> + ?Sized>(
    policy: &P,
    condition: &TokenSequence,
    env: &dyn Environment,
    cap: usize,
) -> Result<TerminalDistribution<T>, OracleError> {
    let needed = space_size(policy.vocab().size(), policy.min_len(), policy.max_len());
    if needed > cap as u128 {
        return Err(OracleError::CapExceeded { needed, cap });
    }
    let mut weights: Vec<(Vec<TokenId>, T)> = Vec::new();
    let mut stack: Vec<(Vec<TokenId>, T)> = vec![(Vec::new(), T::zero())];
    let stop_id = policy.vocab().stop_id();
    while let Some((prefix, log_mass)) = stack.pop() {
        match env.decide(policy.vocab(), &prefix) {
            EnvDecision::Force(t) => {
                let mut ext = prefix;
                ext.push(t);
                stack.push((ext, log_mass));
                continue;
            }
            EnvDecision::Reject => {
                weights.push((prefix, log_mass));
                continue;
            }
            EnvDecision::Free => {}
        }
        let dist = policy.log_dist(condition, &prefix);
        if dist[stop_id] > T::neg_infinity() {
            weights.push((prefix.clone(), log_mass + dist[stop_id]));
        }
        if prefix.len() < policy.max_len() {
            // push in reverse so children pop in token order
            for t in (0..policy.vocab().size()).rev() {
                if dist[t] > T::neg_infinity() {
                    let mut ext = prefix.clone();
                    ext.push(t);
                    stack.push((ext, log_mass + dist[t]));
                }
            }
        }
    }
    weights.sort_by(|a, b| SeqKey(a.0.clone()).cmp(&SeqKey(b.0.clone())));
    // log_mass values are already log-probabilities; keep them unnormalized
    // so total_mass reports the true sum (1 up to masking round-off).
    let mut entries = BTreeMap::new();
    for (ids, lm) in weights {
        if lm > T::neg_infinity() {
            entries.insert(SeqKey(ids), lm.exp());
        }
    }
    let support_size = entries.len();
    Ok(TerminalDistribution {
        entries,
        support_size,
        log_partition: T::zero(),
    })
}

/// KL(p || q) in nats. Requires support(p) within support(q).
pub fn kl<T: Scalar>(
    p: &TerminalDistribution<T>,
    q: &TerminalDistribution<T>,
) -> Result<T, OracleError> {
    let mut total = T::zero();
    for (ids, pp) in p.entries() {
        if pp == T::zero() {
            continue;
        }
        let qq = q.prob(ids);
        if qq == T::zero() {
            return Err(OracleError::SupportViolation);
        }
        total = total + pp * (pp / qq).ln();
    }
    Ok(total)
}

/// Total variation distance, 0 to 1.
pub fn tv<T: Scalar>(p: &TerminalDistribution<T>, q: &TerminalDistribution<T>) -> T {
    let mut keys: Vec<&SeqKey> = p.entries.keys().chain(q.entries.keys()).collect();
    keys.sort();
    keys.dedup();
    let half = T::one() / (T::one() + T::one());
    let mut total = T::zero();
    for k in keys {
        let diff = p.prob(&k.0) - q.prob(&k.0);
        total = total + diff.abs();
    }
    total * half
}

/// log p(Y | X) by exact summation over the latent segment Z, lengths
/// 0..=max_z_len. Z is scored as a continuation of X without a stop event;
/// Y carries the final stop.
pub fn marginal_likelihood<T: Scalar>(
    teacher: &TabularLm<T>,
    x: &TokenSequence,
    y: &TokenSequence,
    max_z_len: usize,
    cap: usize,
) -> Result<T, OracleError> {
    let terms: Vec<T> = enumerate_terminals(teacher.vocab(), 0, max_z_len, cap)?
        .map(|z| {
            let z_open = TokenSequence::from_ids(z.ids().to_vec());
            let prior = teacher.log_prob_given(x, &z_open)?;
            let xz = concat(&[x, &z_open])?;
            let lik = teacher.log_prob_given(&xz, y)?;
            Ok(prior + lik)
        })
        .collect::<Result<_, OracleError>>()?;
    Ok(log_sum_exp(&terms))
}

/// Exact conditional tables of the normalized reward: the policy whose
/// terminal distribution equals [`exact_target`] by construction.
#[derive(Debug, Clone)]
pub struct TabularPolicy<T: Scalar> {
    vocab: VocabRef,
    min_len: usize,
    max_len: usize,
    /// prefix -> log-conditionals over V plus stop
    rows: HashMap<Vec<TokenId>, Vec<T>>,
}

impl<T: Scalar> TabularPolicy<T> {
    pub fn rows(&self) -> &HashMap<Vec<TokenId>, Vec<T>> {
        &self.rows
    }

    /// Additively perturbs one conditional logit and renormalizes that row.
    pub fn perturb_logit(&mut self, prefix: &[TokenId], event: usize, eps: T) {
        let row = self
            .rows
            .get_mut(prefix)
            .expect("prefix present in tables");
        row[event] = row[event] + eps;
        let lse = log_sum_exp(row);
        for v in row.iter_mut() {
            *v = *v - lse;
        }
    }
}

impl<T: Scalar> PolicyDist<T> for TabularPolicy<T> {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn min_len(&self) -> usize {
        self.min_len
    }

    fn max_len(&self) -> usize {
        self.max_len
    }

    fn logits(&self, _condition: &TokenSequence, prefix: &[TokenId]) -> Vec<T> {
        self.rows
            .get(prefix)
            .cloned()
            .unwrap_or_else(|| vec![T::neg_infinity(); self.vocab.size() + 1])
    }
}

/// Inverts a reward into stepwise conditionals by brute force:
/// q*(t | prefix) is the reward mass of terminals extending prefix.t over
/// the mass extending prefix, and q*(stop | prefix) the prefix's own share.
pub fn exact_posterior_policy<T: Scalar, R: RewardFn<T> + ?Sized>(
    reward: &R,
    vocab: VocabRef,
    min_len: usize,
    max_len: usize,
    cap: usize,
) -> Result<TabularPolicy<T>, OracleError> {
    let mut terminal_lw: HashMap<Vec<TokenId>, T> = HashMap::new();
    let mut prefix_terms: HashMap<Vec<TokenId>, Vec<T>> = HashMap::new();
    let mut any = false;
    for z in enumerate_terminals(&vocab, min_len, max_len, cap)? {
        let lw = reward.log_reward(&z);
        if lw == T::neg_infinity() {
            continue;
        }
        any = true;
        terminal_lw.insert(z.ids().to_vec(), lw);
        for i in 0..=z.len() {
            prefix_terms
                .entry(z.ids()[..i].to_vec())
                .or_default()
                .push(lw);
        }
    }
    if !any {
        return Err(OracleError::AllRewardsZero);
    }
    let masses: HashMap<Vec<TokenId>, T> = prefix_terms
        .into_iter()
        .map(|(prefix, terms)| (prefix, log_sum_exp(&terms)))
        .collect();
    let neg_inf = T::neg_infinity();
    let mut rows = HashMap::with_capacity(masses.len());
    for (prefix, mass) in &masses {
        let mut row = vec![neg_inf; vocab.size() + 1];
        for t in 0..vocab.size() {
            let mut ext = prefix.clone();
            ext.push(t);
            if let Some(child) = masses.get(&ext) {
                row[t] = *child - *mass;
            }
        }
        if let Some(lw) = terminal_lw.get(prefix) {
            row[vocab.size()] = *lw - *mass;
        }
        rows.insert(prefix.clone(), row);
    }
    Ok(TabularPolicy {
        vocab,
        min_len,
        max_len,
        rows,
    })
}

/// Exact terminal distribution induced by any policy over an
/// environment-free space; thin wrapper used by reports.
pub fn policy_terminal_mass<T: Scalar, P: PolicyDist<T> + ?Sized>(
    policy: &P,
    condition: &TokenSequence,
    z: &TokenSequence,
    env: &dyn Environment,
) -> T {
    let lp = terminal_log_prob(policy, condition, z, env);
    lp.exp()
}

/// True when a terminated sequence is reachable given the environment.
pub fn env_consistent(
    vocab: &Vocabulary,
    z: &TokenSequence,
    env: &dyn Environment,
) -> bool {
    env_decisions(vocab, z, env).is_some()
}
