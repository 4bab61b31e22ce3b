//! Posterior-predictive prediction: sample latent sequences from the
//! policy, decode an answer from the teacher for each, and majority-vote.

use std::collections::BTreeMap;

use rand::Rng;

use crate::lm::TabularLm;
use crate::policy::{sample_sequence, PolicyDist};
use crate::scalar::Scalar;
use crate::seq::{Environment, TokenSequence, TrajectorySource};

use super::TaskError;

/// How the answer is read off the teacher given the sampled latent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnswerMode {
    /// Deterministic greedy decode of y given x z (default).
    Greedy,
    /// Ancestral sample of y given x z.
    Sampled,
}

/// Majority-vote outcome over decoded answers.
#[derive(Debug, Clone)]
pub struct PredictiveOutcome<T: Scalar> {
    /// Modal decoded answer.
    pub prediction: TokenSequence,
    /// Vote counts keyed by the answer key string.
    pub histogram: BTreeMap<String, usize>,
    /// Total teacher log-likelihood accumulated per key (tie-break data).
    pub key_log_likelihood: BTreeMap<String, T>,
    /// Samples whose answers failed to decode.
    pub undecodable: usize,
}

/// Decodes y from the teacher given context ids, greedy or sampled, capped
/// at `max_y_len` tokens. Returns the terminated y and its conditional
/// log-likelihood.
pub fn decode_answer<T: Scalar>(
    teacher: &TabularLm<T>,
    context: &[usize],
    max_y_len: usize,
    mode: AnswerMode,
    rng: &mut impl Rng,
) -> (TokenSequence, T) {
    let stop_id = teacher.vocab().stop_id();
    let mut ids = context.to_vec();
    let mut y = TokenSequence::empty();
    let mut loglik = T::zero();
    loop {
        let dist = teacher.cond_logprobs_ids(&ids);
        let event = match mode {
            AnswerMode::Greedy => dist
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap_or(stop_id),
            AnswerMode::Sampled => {
                let u: f64 = rng.gen();
                let mut acc = 0.0f64;
                let mut chosen = stop_id;
                for (i, lp) in dist.iter().enumerate() {
                    acc += lp.exp().to_f64().unwrap_or(0.0);
                    if u < acc {
                        chosen = i;
                        break;
                    }
                }
                chosen
            }
        };
        loglik = loglik + dist[event];
        if event == stop_id || y.len() >= max_y_len {
            y.terminate();
            return (y, loglik);
        }
        y.push(event);
        ids.push(event);
    }
}

/// Draws `n_samples` latents from the policy, decodes an answer for each,
/// and returns the majority vote. Ties break toward the key with higher
/// accumulated teacher log-likelihood, then lexicographically.
#[allow(clippy::too_many_arguments)]
pub fn posterior_predictive<T: Scalar, P: PolicyDist<T> + ?Sized>(
    policy: &P,
    teacher: &TabularLm<T>,
    x: &TokenSequence,
    n_samples: usize,
    sample_temperature: T,
    max_y_len: usize,
    mode: AnswerMode,
    env: &dyn Environment,
    answer_key: &dyn Fn(&TokenSequence) -> Option<String>,
    rng: &mut impl Rng,
) -> Result<PredictiveOutcome<T>, TaskError> {
    assert!(n_samples >= 1, "need at least one sample");
    let mut histogram: BTreeMap<String, usize> = BTreeMap::new();
    let mut key_ll: BTreeMap<String, T> = BTreeMap::new();
    let mut representative: BTreeMap<String, TokenSequence> = BTreeMap::new();
    let mut undecodable = 0usize;
    for _ in 0..n_samples {
        let z = sample_sequence(
            policy,
            x,
            sample_temperature,
            rng,
            env,
            TrajectorySource::OnPolicy,
        )
        .sequence;
        let mut context = x.ids().to_vec();
        context.extend_from_slice(z.ids());
        let (y, ll) = decode_answer(teacher, &context, max_y_len, mode, rng);
        match answer_key(&y) {
            Some(key) => {
                *histogram.entry(key.clone()).or_insert(0) += 1;
                let entry = key_ll.entry(key.clone()).or_insert_with(T::zero);
                *entry = *entry + ll;
                representative.entry(key).or_insert(y);
            }
            None => undecodable += 1,
        }
    }
    let winner = histogram
        .iter()
        .max_by(|(ka, &ca), (kb, &cb)| {
            ca.cmp(&cb)
                .then_with(|| key_ll[*ka].partial_cmp(&key_ll[*kb]).unwrap())
                .then_with(|| kb.cmp(ka)) // lexicographically smaller wins
        })
        .map(|(k, _)| k.clone())
        .ok_or(TaskError::NoDecodableAnswer)?;
    Ok(PredictiveOutcome {
        prediction: representative.remove(&winner).expect("winner present"),
        histogram,
        key_log_likelihood: key_ll,
        undecodable,
    })
}
