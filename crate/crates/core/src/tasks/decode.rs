//! Standard decoding baselines (greedy, tempered, top-k, nucleus, beam) and
//! the continuation quality/diversity metrics they are compared under.

use std::sync::Arc;

use rand::Rng;

use crate::lm::TabularLm;
use crate::policy::{sample_sequence, PolicyDist};
use crate::scalar::{fp, Scalar};
use crate::seq::{FreeEnv, TokenId, TokenSequence, TrajectorySource, Vocabulary};

use super::TaskError;

/// A teacher model exposed as a sampling policy with a length cap.
#[derive(Debug, Clone)]
pub struct LmPolicy<T: Scalar> {
    lm: Arc<TabularLm<T>>,
    max_len: usize,
}

impl<T: Scalar> LmPolicy<T> {
    pub fn new(lm: Arc<TabularLm<T>>, max_len: usize) -> Self {
        Self { lm, max_len }
    }
}

impl<T: Scalar> PolicyDist<T> for LmPolicy<T> {
    fn vocab(&self) -> &Vocabulary {
        self.lm.vocab()
    }

    fn min_len(&self) -> usize {
        0
    }

    fn max_len(&self) -> usize {
        self.max_len
    }

    fn logits(&self, condition: &TokenSequence, prefix: &[TokenId]) -> Vec<T> {
        let mut full = condition.ids().to_vec();
        full.extend_from_slice(prefix);
        self.lm.cond_logprobs_ids(&full)
    }
}

/// Decoding method selector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecodeMethod<T> {
    Greedy,
    Temperature(T),
    TopK(usize),
    Nucleus(T),
    Beam(usize),
}

/// Runs a decoding baseline. Greedy returns one sequence, beam returns its
/// width, the samplers return `n_samples`.
pub fn decode_baselines<T: Scalar, P: PolicyDist<T> + ?Sized>(
    policy: &P,
    condition: &TokenSequence,
    method: DecodeMethod<T>,
    n_samples: usize,
    rng: &mut impl Rng,
) -> Result<Vec<TokenSequence>, TaskError> {
    match method {
        DecodeMethod::Greedy => {
            let t = sample_sequence(
                policy,
                condition,
                T::zero(),
                rng,
                &FreeEnv,
                TrajectorySource::OnPolicy,
            );
            Ok(vec![t.sequence])
        }
        DecodeMethod::Temperature(temp) => Ok((0..n_samples)
            .map(|_| {
                sample_sequence(
                    policy,
                    condition,
                    temp,
                    rng,
                    &FreeEnv,
                    TrajectorySource::OnPolicy,
                )
                .sequence
            })
            .collect()),
        DecodeMethod::TopK(k) => {
            assert!(k >= 1, "top-k needs k >= 1");
            Ok((0..n_samples)
                .map(|_| truncated_walk(policy, condition, rng, |probs| top_k_set(probs, k)))
                .collect())
        }
        DecodeMethod::Nucleus(p) => {
            assert!(p > T::zero() && p <= T::one(), "nucleus needs 0 < p <= 1");
            Ok((0..n_samples)
                .map(|_| truncated_walk(policy, condition, rng, |probs| nucleus_set(probs, p)))
                .collect())
        }
        DecodeMethod::Beam(width) => {
            assert!(width >= 1, "beam needs width >= 1");
            Ok(beam_search(policy, condition, width))
        }
    }
}

/// Indices of the k highest-probability events, ties by lower index.
fn top_k_set<T: Scalar>(probs: &[T], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Smallest high-probability set with cumulative mass at least p.
fn nucleus_set<T: Scalar>(probs: &[T], p: T) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
    let mut kept = Vec::new();
    let mut acc = T::zero();
    for idx in order {
        if probs[idx] == T::zero() && !kept.is_empty() {
            break;
        }
        kept.push(idx);
        acc = acc + probs[idx];
        if acc >= p {
            break;
        }
    }
    kept
}

/// Ancestral walk restricted at every state to a chosen support set,
/// renormalized.
fn truncated_walk<T: Scalar, P: PolicyDist<T> + ?Sized>(
    policy: &P,
    condition: &TokenSequence,
    rng: &mut impl Rng,
    pick_support: impl Fn(&[T]) -> Vec<usize>,
) -> TokenSequence {
    let stop_id = policy.vocab().stop_id();
    let mut seq = TokenSequence::empty();
    loop {
        let dist = policy.log_dist(condition, seq.ids());
        let probs: Vec<T> = dist.iter().map(|lp| lp.exp()).collect();
        let support = pick_support(&probs);
        let mass: T = support.iter().map(|&i| probs[i]).sum();
        let u: f64 = rng.gen();
        let mut acc = 0.0f64;
        let mut chosen = *support.last().expect("nonempty support");
        for &i in &support {
            acc += (probs[i] / mass).to_f64().unwrap_or(0.0);
            if u < acc {
                chosen = i;
                break;
            }
        }
        if chosen == stop_id {
            seq.terminate();
            return seq;
        }
        seq.push(chosen);
    }
}

/// Deterministic beam search; returns the top-`width` terminated sequences
/// by total log-probability, ties broken shortlex.
fn beam_search<T: Scalar, P: PolicyDist<T> + ?Sized>(
    policy: &P,
    condition: &TokenSequence,
    width: usize,
) -> Vec<TokenSequence> {
    let stop_id = policy.vocab().stop_id();
    let mut live: Vec<(Vec<TokenId>, T)> = vec![(Vec::new(), T::zero())];
    let mut done: Vec<(Vec<TokenId>, T)> = Vec::new();
    for _ in 0..=policy.max_len() {
        let mut next: Vec<(Vec<TokenId>, T)> = Vec::new();
        for (prefix, lp) in &live {
            let dist = policy.log_dist(condition, prefix);
            for (event, elp) in dist.iter().enumerate() {
                if *elp == T::neg_infinity() {
                    continue;
                }
                if event == stop_id {
                    done.push((prefix.clone(), *lp + *elp));
                } else {
                    let mut ext = prefix.clone();
                    ext.push(event);
                    next.push((ext, *lp + *elp));
                }
            }
        }
        let by_score = |a: &(Vec<TokenId>, T), b: &(Vec<TokenId>, T)| {
            b.1.partial_cmp(&a.1)
                .unwrap()
                .then_with(|| (a.0.len(), &a.0).cmp(&(b.0.len(), &b.0)))
        };
        next.sort_by(by_score);
        next.truncate(width);
        done.sort_by(by_score);
        done.truncate(width);
        live = next;
        // stop early once no live beam can beat the worst kept terminal
        if live.is_empty()
            || (done.len() == width
                && live
                    .first()
                    .map(|(_, lp)| *lp <= done[width - 1].1)
                    .unwrap_or(true))
        {
            break;
        }
    }
    done.into_iter()
        .take(width)
        .map(|(ids, _)| TokenSequence::terminated_from(ids))
        .collect()
}

/// Quality and diversity summary of a sample set.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuationMetrics<T> {
    /// Highest sequence log-likelihood under the scoring model.
    pub max_log_likelihood: T,
    /// Mean pairwise normalized edit distance (0 when fewer than 2 samples).
    pub mean_edit_distance: T,
    /// Distinct sequences over sample count.
    pub distinct_fraction: T,
}

/// Scores samples under the teacher and measures string diversity.
pub fn continuation_metrics<T: Scalar>(
    samples: &[TokenSequence],
    lm: &TabularLm<T>,
) -> Result<ContinuationMetrics<T>, TaskError> {
    if samples.is_empty() {
        return Err(TaskError::EmptySamples);
    }
    let mut max_ll = T::neg_infinity();
    for s in samples {
        let ll = lm.log_prob_seq(&s.as_terminated())?;
        if ll > max_ll {
            max_ll = ll;
        }
    }
    let mut pair_total = T::zero();
    let mut pairs = 0usize;
    for i in 0..samples.len() {
        for j in (i + 1)..samples.len() {
            pair_total = pair_total + normalized_edit_distance(&samples[i], &samples[j]);
            pairs += 1;
        }
    }
    let mean_edit = if pairs == 0 {
        T::zero()
    } else {
        pair_total / fp::<T>(pairs as f64)
    };
    let mut distinct: Vec<&[TokenId]> = samples.iter().map(|s| s.ids()).collect();
    distinct.sort();
    distinct.dedup();
    Ok(ContinuationMetrics {
        max_log_likelihood: max_ll,
        mean_edit_distance: mean_edit,
        distinct_fraction: fp::<T>(distinct.len() as f64 / samples.len() as f64),
    })
}

/// Levenshtein distance over token ids divided by the longer length.
pub fn normalized_edit_distance<T: Scalar>(a: &TokenSequence, b: &TokenSequence) -> T {
    let (a, b) = (a.ids(), b.ids());
    if a.is_empty() && b.is_empty() {
        return T::zero();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &ta) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &tb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ta != tb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    fp::<T>(prev[b.len()] as f64 / a.len().max(b.len()) as f64)
}
