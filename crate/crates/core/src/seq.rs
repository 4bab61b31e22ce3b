//! Vocabulary, sequence, and trajectory primitives shared by every other
//! module.
//!
//! Sequences are plain lists of token indices over a [`Vocabulary`]; the stop
//! event is a reserved index outside the token range. All types here are
//! immutable after construction and safe to share across threads.

use std::collections::HashMap;
use std::sync::Arc;

use thiserror::Error;

use crate::scalar::Scalar;

/// Index into a vocabulary's token list.
pub type TokenId = usize;

/// Rendering of the stop event in serialized sequences.
pub const STOP_TOKEN: &str = "<STOP>";

/// Rendering of begin-of-sequence padding in serialized contexts.
pub const BOS_TOKEN: &str = "<BOS>";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SeqError {
    #[error("vocabulary must contain at least one token")]
    EmptyVocabulary,
    #[error("duplicate token {0:?}")]
    DuplicateToken(String),
    #[error("empty token or token containing whitespace not allowed")]
    BlankToken,
    #[error("token {0:?} reserved for the stop event")]
    ReservedToken(String),
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("prefix index {index} out of range for sequence of length {len}")]
    PrefixOutOfRange { index: usize, len: usize },
    #[error("only the final segment of a concatenation may be terminated")]
    TerminatedSegment,
    #[error("stop marker {STOP_TOKEN} may only appear at the end of a line")]
    MisplacedStop,
}

/// Ordered set of distinct token strings plus a reserved stop index.
///
/// The stop index equals `size()` and is not a member of the token list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    lookup: HashMap<String, TokenId>,
}

impl Vocabulary {
    pub fn new<S: Into<String>>(tokens: impl IntoIterator<Item = S>) -> Result<Self, SeqError> {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        if tokens.is_empty() {
            return Err(SeqError::EmptyVocabulary);
        }
        let mut lookup = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(SeqError::BlankToken);
            }
            if tok == STOP_TOKEN || tok == BOS_TOKEN {
                return Err(SeqError::ReservedToken(tok.clone()));
            }
            if lookup.insert(tok.clone(), id).is_some() {
                return Err(SeqError::DuplicateToken(tok.clone()));
            }
        }
        Ok(Self { tokens, lookup })
    }

    /// Number of ordinary tokens (the stop event excluded).
    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    /// Reserved index of the stop event; also the length of per-state
    /// distributions minus one.
    pub fn stop_id(&self) -> TokenId {
        self.tokens.len()
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id_of(&self, token: &str) -> Option<TokenId> {
        self.lookup.get(token).copied()
    }

    /// Parses a whitespace-joined line; a trailing `<STOP>` marks termination.
    pub fn parse_seq(&self, line: &str) -> Result<TokenSequence, SeqError> {
        let mut ids = Vec::new();
        let mut terminated = false;
        for tok in line.split_whitespace() {
            if terminated {
                return Err(SeqError::MisplacedStop);
            }
            if tok == STOP_TOKEN {
                terminated = true;
                continue;
            }
            let id = self
                .id_of(tok)
                .ok_or_else(|| SeqError::UnknownToken(tok.to_string()))?;
            ids.push(id);
        }
        Ok(TokenSequence { ids, terminated })
    }

    /// Whitespace-joined rendering; the stop event renders as `<STOP>`.
    pub fn render(&self, seq: &TokenSequence) -> String {
        let mut parts: Vec<&str> = seq.ids.iter().map(|&id| self.token(id)).collect();
        if seq.terminated {
            parts.push(STOP_TOKEN);
        }
        parts.join(" ")
    }
}

/// Finite token string plus an explicit termination flag.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct TokenSequence {
    ids: Vec<TokenId>,
    terminated: bool,
}

impl TokenSequence {
    pub fn new(ids: Vec<TokenId>, terminated: bool) -> Self {
        Self { ids, terminated }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn from_ids(ids: Vec<TokenId>) -> Self {
        Self {
            ids,
            terminated: false,
        }
    }

    pub fn terminated_from(ids: Vec<TokenId>) -> Self {
        Self {
            ids,
            terminated: true,
        }
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn is_terminated(&self) -> bool {
        self.terminated
    }

    /// Appends a token. A terminated sequence is immutable.
    pub fn push(&mut self, id: TokenId) {
        assert!(!self.terminated, "terminated sequences are immutable");
        self.ids.push(id);
    }

    /// Marks the sequence terminated.
    pub fn terminate(&mut self) {
        self.terminated = true;
    }

    /// Copy of the sequence with the termination flag set.
    pub fn as_terminated(&self) -> Self {
        Self {
            ids: self.ids.clone(),
            terminated: true,
        }
    }

    /// First `i` tokens, unterminated.
    pub fn prefix(&self, i: usize) -> Result<Self, SeqError> {
        if i > self.ids.len() {
            return Err(SeqError::PrefixOutOfRange {
                index: i,
                len: self.ids.len(),
            });
        }
        Ok(Self {
            ids: self.ids[..i].to_vec(),
            terminated: false,
        })
    }
}

/// Concatenation of segments; the termination flag is taken from the last.
///
/// Only the final segment may carry termination.
pub fn concat(segments: &[&TokenSequence]) -> Result<TokenSequence, SeqError> {
    let mut ids = Vec::new();
    let mut terminated = false;
    for (pos, seg) in segments.iter().enumerate() {
        if seg.terminated && pos + 1 != segments.len() {
            return Err(SeqError::TerminatedSegment);
        }
        ids.extend_from_slice(&seg.ids);
        terminated = seg.terminated;
    }
    Ok(TokenSequence { ids, terminated })
}

/// X ++ Z ++ Y with termination taken from Y.
pub fn concat3(
    x: &TokenSequence,
    z: &TokenSequence,
    y: &TokenSequence,
) -> Result<TokenSequence, SeqError> {
    concat(&[x, z, y])
}

/// Which behavior distribution produced a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrajectorySource {
    OnPolicy,
    Tempered,
    Replay,
}

/// A sampled sequence together with the log-probabilities recorded under the
/// untempered policy that produced it.
///
/// `step_logprobs` has one finite entry per token (environment-forced tokens
/// record 0); `stop_logprobs[i]` is log q(stop | first i tokens) and may be
/// -inf at states where the stop event is masked or forced away.
#[derive(Debug, Clone)]
pub struct Trajectory<T: Scalar> {
    pub sequence: TokenSequence,
    pub step_logprobs: Vec<T>,
    pub stop_logprobs: Vec<T>,
    pub source: TrajectorySource,
}

impl<T: Scalar> Trajectory<T> {
    /// Consistency of the recorded shapes with the sequence.
    pub fn shape_ok(&self) -> bool {
        self.sequence.is_terminated()
            && self.step_logprobs.len() == self.sequence.len()
            && self.stop_logprobs.len() == self.sequence.len() + 1
            && self.step_logprobs.iter().all(|lp| lp.is_finite() && *lp <= T::zero())
            && self.stop_logprobs.iter().all(|lp| *lp <= T::zero())
    }
}

/// Decision an environment makes after observing the generated prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvDecision {
    /// Policy chooses the next event freely.
    Free,
    /// Environment appends this token with probability 1.
    Force(TokenId),
    /// The prefix is malformed; the trajectory terminates with zero reward.
    Reject,
}

/// Deterministic environment interleaved with generation (e.g. a calculator
/// tool). Implementations are pure functions of the generated prefix.
pub trait Environment: Send + Sync {
    fn decide(&self, vocab: &Vocabulary, prefix: &[TokenId]) -> EnvDecision;
}

/// Environment that never intervenes: plain autoregressive generation.
#[derive(Debug, Clone, Copy, Default)]
pub struct FreeEnv;

impl Environment for FreeEnv {
    fn decide(&self, _vocab: &Vocabulary, _prefix: &[TokenId]) -> EnvDecision {
        EnvDecision::Free
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn abc() -> Vocabulary {
        Vocabulary::new(["a", "b", "c"]).unwrap()
    }

    #[test]
    fn vocabulary_rejects_duplicates_and_stop() {
        assert_eq!(
            Vocabulary::new(["a", "a"]).unwrap_err(),
            SeqError::DuplicateToken("a".into())
        );
        assert!(Vocabulary::new(["a", STOP_TOKEN]).is_err());
        assert_eq!(
            Vocabulary::new(Vec::<String>::new()).unwrap_err(),
            SeqError::EmptyVocabulary
        );
    }

    #[test]
    fn stop_id_outside_token_range() {
        let v = abc();
        assert_eq!(v.stop_id(), 3);
        assert_eq!(v.size(), 3);
    }

    #[test]
    fn prefix_examples() {
        let seq = TokenSequence::from_ids(vec![0, 1, 2]);
        assert_eq!(seq.prefix(0).unwrap(), TokenSequence::empty());
        assert_eq!(seq.prefix(3).unwrap(), seq);
        assert_eq!(
            seq.prefix(2).unwrap(),
            TokenSequence::from_ids(vec![0, 1])
        );
        assert!(seq.prefix(4).is_err());
    }

    #[test]
    fn concat_examples() {
        let a = TokenSequence::from_ids(vec![0]);
        let b = TokenSequence::from_ids(vec![1]);
        let c = TokenSequence::from_ids(vec![2]);
        let empty = TokenSequence::empty();
        assert_eq!(
            concat3(&empty, &a, &empty).unwrap(),
            TokenSequence::from_ids(vec![0])
        );
        assert_eq!(
            concat3(&a, &b, &c).unwrap(),
            TokenSequence::from_ids(vec![0, 1, 2])
        );
        assert_eq!(
            concat3(&a, &empty, &empty).unwrap(),
            TokenSequence::from_ids(vec![0])
        );
    }

    #[test]
    fn concat_termination_from_last_segment_only() {
        let a = TokenSequence::from_ids(vec![0]);
        let y = TokenSequence::terminated_from(vec![1]);
        let joined = concat(&[&a, &y]).unwrap();
        assert!(joined.is_terminated());
        assert!(concat(&[&y, &a]).is_err());
    }

    #[test]
    fn render_parse_round_trip() {
        let v = abc();
        let seq = TokenSequence::terminated_from(vec![0, 2]);
        let text = v.render(&seq);
        assert_eq!(text, "a c <STOP>");
        assert_eq!(v.parse_seq(&text).unwrap(), seq);
        assert_eq!(v.parse_seq("").unwrap(), TokenSequence::empty());
        assert_eq!(
            v.parse_seq("<STOP>").unwrap(),
            TokenSequence::terminated_from(vec![])
        );
        assert!(v.parse_seq("a <STOP> b").is_err());
        assert!(v.parse_seq("a d").is_err());
    }

    #[test]
    #[should_panic(expected = "immutable")]
    fn terminated_sequence_is_immutable() {
        let mut seq = TokenSequence::terminated_from(vec![0]);
        seq.push(1);
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn prefix_full_and_empty(ids in proptest::collection::vec(0usize..5, 0..12)) {
            let seq = TokenSequence::from_ids(ids);
            prop_assert_eq!(seq.prefix(seq.len()).unwrap(), seq.clone());
            prop_assert!(seq.prefix(0).unwrap().is_empty());
        }

        #[test]
        fn concat_is_associative(
            a in proptest::collection::vec(0usize..5, 0..6),
            b in proptest::collection::vec(0usize..5, 0..6),
            c in proptest::collection::vec(0usize..5, 0..6),
        ) {
            let (a, b, c) = (
                TokenSequence::from_ids(a),
                TokenSequence::from_ids(b),
                TokenSequence::from_ids(c),
            );
            let left = concat(&[&concat(&[&a, &b]).unwrap(), &c]).unwrap();
            let right = concat(&[&a, &concat(&[&b, &c]).unwrap()]).unwrap();
            prop_assert_eq!(left.ids(), right.ids());
        }
    }
}

/// Shared handle used where many objects reference one vocabulary.
pub type VocabRef = Arc<Vocabulary>;
