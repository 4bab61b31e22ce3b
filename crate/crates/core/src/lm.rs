//! Tabular n-gram teacher model: exact conditionals, exact sequence scoring,
//! corpus fitting, and the weighted maximum-likelihood refit used as the
//! M-step of expectation-maximization.
//!
//! Conditionals are additive-smoothed count ratios over V plus the stop
//! event, keyed by a begin-padded context window of fixed length. The model
//! is immutable after construction; refits return a new value.

use std::collections::BTreeMap;
use std::sync::Arc;

use thiserror::Error;

use crate::scalar::{fp, Scalar};
use crate::seq::{concat3, SeqError, TokenId, TokenSequence, VocabRef, Vocabulary, BOS_TOKEN};

#[derive(Debug, Error)]
pub enum LmError {
    #[error("context order must be at least 1")]
    ZeroOrder,
    #[error("smoothing pseudo-count must be nonnegative and finite")]
    BadAlpha,
    #[error("empty corpus requires positive smoothing")]
    EmptyCorpus,
    #[error("token id {0} outside vocabulary")]
    InvalidToken(TokenId),
    #[error("negative sample weight")]
    NegativeWeight,
    #[error("all sample weights are zero")]
    AllZeroWeights,
    #[error("prefix must be unterminated")]
    TerminatedPrefix,
    #[error("sequence must be terminated")]
    UnterminatedSequence,
    #[error(transparent)]
    Seq(#[from] SeqError),
    #[error("checkpoint parse failure: {0}")]
    Checkpoint(String),
}

/// Context symbol: begin padding or an ordinary token.
///
/// `Bos` orders before every token so checkpoint key order is stable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CtxSym {
    Bos,
    Tok(TokenId),
}

type Context = Vec<CtxSym>;

/// Tabular autoregressive model with exact conditionals over V plus stop.
#[derive(Debug, Clone)]
pub struct TabularLm<T: Scalar> {
    order: usize,
    vocab: VocabRef,
    alpha: T,
    /// context -> normalized distribution of length `vocab.size() + 1`
    /// (stop at the last index).
    table: BTreeMap<Context, Vec<T>>,
    fallback: Vec<T>,
}

impl<T: Scalar> TabularLm<T> {
    /// Maximum-likelihood fit with additive smoothing `alpha`. A stop event
    /// is counted after every corpus sequence.
    pub fn fit_ngram(
        vocab: VocabRef,
        corpus: &[TokenSequence],
        order: usize,
        alpha: T,
    ) -> Result<Self, LmError> {
        let weighted: Vec<(TokenSequence, T)> =
            corpus.iter().map(|s| (s.clone(), T::one())).collect();
        Self::fit_weighted(vocab, &weighted, order, alpha)
    }

    /// Weighted fit; weights act as fractional counts.
    pub fn fit_weighted(
        vocab: VocabRef,
        corpus: &[(TokenSequence, T)],
        order: usize,
        alpha: T,
    ) -> Result<Self, LmError> {
        if order == 0 {
            return Err(LmError::ZeroOrder);
        }
        if !(alpha >= T::zero()) || !alpha.is_finite() {
            return Err(LmError::BadAlpha);
        }
        if corpus.is_empty() && alpha == T::zero() {
            return Err(LmError::EmptyCorpus);
        }
        let n_events = vocab.size() + 1;
        let mut counts: BTreeMap<Context, Vec<T>> = BTreeMap::new();
        for (seq, weight) in corpus {
            if *weight < T::zero() {
                return Err(LmError::NegativeWeight);
            }
            if *weight == T::zero() {
                continue;
            }
            let mut ctx = vec![CtxSym::Bos; order];
            for &id in seq.ids() {
                if id >= vocab.size() {
                    return Err(LmError::InvalidToken(id));
                }
                counts.entry(ctx.clone()).or_insert_with(|| vec![T::zero(); n_events])[id] +=
                    *weight;
                ctx.remove(0);
                ctx.push(CtxSym::Tok(id));
            }
            counts.entry(ctx).or_insert_with(|| vec![T::zero(); n_events])[vocab.size()] +=
                *weight;
        }
        if counts.is_empty() && alpha == T::zero() && !corpus.is_empty() {
            return Err(LmError::AllZeroWeights);
        }

        let normalize = |row: &[T]| -> Vec<T> {
            let total: T = row.iter().copied().sum::<T>() + alpha * fp::<T>(n_events as f64);
            if total == T::zero() {
                // Unreachable through sampling: only zero-probability
                // prefixes resolve here when alpha = 0.
                return vec![T::one() / fp::<T>(n_events as f64); n_events];
            }
            row.iter().map(|&c| (c + alpha) / total).collect()
        };
        let table: BTreeMap<Context, Vec<T>> = counts
            .into_iter()
            .map(|(ctx, row)| (ctx, normalize(&row)))
            .collect();
        let fallback = normalize(&vec![T::zero(); n_events]);
        Ok(Self {
            order,
            vocab,
            alpha,
            table,
            fallback,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn alpha(&self) -> T {
        self.alpha
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn vocab_ref(&self) -> VocabRef {
        Arc::clone(&self.vocab)
    }

    pub fn context_count(&self) -> usize {
        self.table.len()
    }

    fn context_of(&self, ids: &[TokenId]) -> Context {
        let mut ctx = Vec::with_capacity(self.order);
        let pad = self.order.saturating_sub(ids.len());
        ctx.extend(std::iter::repeat(CtxSym::Bos).take(pad));
        let start = ids.len() - (self.order - pad);
        ctx.extend(ids[start..].iter().map(|&id| CtxSym::Tok(id)));
        ctx
    }

    /// Distribution (not log) over V plus stop for the given context window.
    fn dist_for(&self, ids: &[TokenId]) -> &[T] {
        self.table
            .get(&self.context_of(ids))
            .map(Vec::as_slice)
            .unwrap_or(&self.fallback)
    }

    /// Log-distribution over V plus stop conditioned on an unterminated
    /// prefix. Exponentials sum to 1.
    pub fn cond_logprobs(&self, prefix: &TokenSequence) -> Result<Vec<T>, LmError> {
        if prefix.is_terminated() {
            return Err(LmError::TerminatedPrefix);
        }
        self.check_ids(prefix.ids())?;
        Ok(self.cond_logprobs_ids(prefix.ids()))
    }

    /// Same as [`cond_logprobs`](Self::cond_logprobs) on raw ids, skipping
    /// validation. Used on hot paths by the policy.
    pub fn cond_logprobs_ids(&self, ids: &[TokenId]) -> Vec<T> {
        self.dist_for(ids).iter().map(|&p| p.ln()).collect()
    }

    fn check_ids(&self, ids: &[TokenId]) -> Result<(), LmError> {
        match ids.iter().find(|&&id| id >= self.vocab.size()) {
            Some(&id) => Err(LmError::InvalidToken(id)),
            None => Ok(()),
        }
    }

    /// Chain-rule log-probability of a terminated sequence, including the
    /// final stop factor. Returns -inf for zero-probability sequences.
    pub fn log_prob_seq(&self, seq: &TokenSequence) -> Result<T, LmError> {
        if !seq.is_terminated() {
            return Err(LmError::UnterminatedSequence);
        }
        self.check_ids(seq.ids())?;
        let mut total = T::zero();
        for (i, &id) in seq.ids().iter().enumerate() {
            total = total + self.dist_for(&seq.ids()[..i])[id].ln();
        }
        total = total + self.dist_for(seq.ids())[self.vocab.size()].ln();
        Ok(total)
    }

    /// log p(XZY) for a terminated Y: the unnormalized posterior numerator.
    pub fn joint_log_prob(
        &self,
        x: &TokenSequence,
        z: &TokenSequence,
        y: &TokenSequence,
    ) -> Result<T, LmError> {
        if x.is_terminated() || z.is_terminated() {
            return Err(LmError::TerminatedPrefix);
        }
        if !y.is_terminated() {
            return Err(LmError::UnterminatedSequence);
        }
        self.log_prob_seq(&concat3(x, z, y)?)
    }

    /// log probability of the tokens of `suffix` (and, when `suffix` is
    /// terminated, the stop event) given the unterminated `prefix` context.
    pub fn log_prob_given(
        &self,
        prefix: &TokenSequence,
        suffix: &TokenSequence,
    ) -> Result<T, LmError> {
        if prefix.is_terminated() {
            return Err(LmError::TerminatedPrefix);
        }
        self.check_ids(prefix.ids())?;
        self.check_ids(suffix.ids())?;
        let mut ids = prefix.ids().to_vec();
        let mut total = T::zero();
        for &id in suffix.ids() {
            total = total + self.dist_for(&ids)[id].ln();
            ids.push(id);
        }
        if suffix.is_terminated() {
            total = total + self.dist_for(&ids)[self.vocab.size()].ln();
        }
        Ok(total)
    }

    /// Weighted maximum-likelihood refit on concatenated XZY triples,
    /// keeping order and smoothing. The M-step of EM.
    pub fn m_step_update(
        &self,
        samples: &[(TokenSequence, TokenSequence, TokenSequence, T)],
    ) -> Result<Self, LmError> {
        if samples.iter().any(|(_, _, _, w)| *w < T::zero()) {
            return Err(LmError::NegativeWeight);
        }
        if !samples.iter().any(|(_, _, _, w)| *w > T::zero()) {
            return Err(LmError::AllZeroWeights);
        }
        let mut corpus = Vec::with_capacity(samples.len());
        for (x, z, y, w) in samples {
            corpus.push((concat3(x, z, y)?, *w));
        }
        Self::fit_weighted(self.vocab_ref(), &corpus, self.order, self.alpha)
    }

    /// Versioned text checkpoint with deterministic key ordering. Decimal
    /// floats use the shortest representation that round-trips exactly.
    pub fn write_checkpoint(&self) -> String {
        let mut out = String::new();
        out.push_str("seqflow-teacher v1\n");
        out.push_str(&format!("scalar {}\n", T::BITS));
        out.push_str(&format!("order {}\n", self.order));
        out.push_str(&format!("alpha {:?}\n", self.alpha));
        out.push_str(&format!("vocab {}\n", self.vocab.size()));
        for tok in self.vocab.tokens() {
            out.push_str(&format!("token {tok}\n"));
        }
        out.push_str(&format!("contexts {}\n", self.table.len()));
        for (ctx, dist) in &self.table {
            out.push_str("ctx");
            for sym in ctx {
                match sym {
                    CtxSym::Bos => out.push_str(&format!(" {BOS_TOKEN}")),
                    CtxSym::Tok(id) => out.push_str(&format!(" {}", self.vocab.token(*id))),
                }
            }
            out.push_str(" :");
            for p in dist {
                out.push_str(&format!(" {p:?}"));
            }
            out.push('\n');
        }
        out.push_str("end\n");
        out
    }

    pub fn read_checkpoint(text: &str) -> Result<Self, LmError> {
        let bad = |msg: &str| LmError::Checkpoint(msg.to_string());
        let mut lines = text.lines();
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| bad(&format!("missing {what} line")))
        };
        if next("header")? != "seqflow-teacher v1" {
            return Err(bad("unsupported header"));
        }
        let scalar_line = next("scalar")?;
        let bits: u32 = scalar_line
            .strip_prefix("scalar ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("scalar"))?;
        if bits != T::BITS {
            return Err(bad(&format!(
                "checkpoint scalar width {bits}, expected {}",
                T::BITS
            )));
        }
        let order: usize = next("order")?
            .strip_prefix("order ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("order"))?;
        let alpha: T = next("alpha")?
            .strip_prefix("alpha ")
            .and_then(T::parse_decimal)
            .ok_or_else(|| bad("alpha"))?;
        let n_tokens: usize = next("vocab")?
            .strip_prefix("vocab ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("vocab"))?;
        let mut tokens = Vec::with_capacity(n_tokens);
        for _ in 0..n_tokens {
            tokens.push(
                next("token")?
                    .strip_prefix("token ")
                    .ok_or_else(|| bad("token"))?
                    .to_string(),
            );
        }
        let vocab = Arc::new(Vocabulary::new(tokens)?);
        let n_ctx: usize = next("contexts")?
            .strip_prefix("contexts ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("contexts"))?;
        let n_events = vocab.size() + 1;
        let mut table = BTreeMap::new();
        for _ in 0..n_ctx {
            let line = next("ctx")?;
            let mut fields = line.split_whitespace();
            if fields.next() != Some("ctx") {
                return Err(bad("ctx prefix"));
            }
            let mut ctx = Vec::with_capacity(order);
            for _ in 0..order {
                let sym = fields.next().ok_or_else(|| bad("ctx symbol"))?;
                if sym == BOS_TOKEN {
                    ctx.push(CtxSym::Bos);
                } else {
                    let id = vocab
                        .id_of(sym)
                        .ok_or_else(|| bad(&format!("unknown context token {sym}")))?;
                    ctx.push(CtxSym::Tok(id));
                }
            }
            if fields.next() != Some(":") {
                return Err(bad("ctx separator"));
            }
            let dist: Vec<T> = fields
                .map(|f| T::parse_decimal(f).ok_or_else(|| bad("probability")))
                .collect::<Result<_, _>>()?;
            if dist.len() != n_events {
                return Err(bad("distribution width"));
            }
            table.insert(ctx, dist);
        }
        if next("end")? != "end" {
            return Err(bad("missing end marker"));
        }
        let alpha_ok = alpha >= T::zero() && alpha.is_finite();
        if order == 0 || !alpha_ok {
            return Err(bad("invalid order or alpha"));
        }
        let total = alpha * fp::<T>(n_events as f64);
        let fallback = if total == T::zero() {
            vec![T::one() / fp::<T>(n_events as f64); n_events]
        } else {
            vec![alpha / total; n_events]
        };
        Ok(Self {
            order,
            vocab,
            alpha,
            table,
            fallback,
        })
    }
}

/// FNV-1a hash of checkpoint text; binds policy checkpoints to the teacher
/// they were trained against.
pub fn checksum(text: &str) -> String {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in text.as_bytes() {
        hash ^= u64::from(*byte);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{hash:016x}")
}
