//! Two-term calculator tool environment.
//!
//! When the policy emits `=`, the expression preceding it is evaluated and
//! the integer result is appended as environment-forced tokens. Only the
//! last two terms of the current clause are evaluated; a clause with fewer
//! than two terms is a rejection event and the trajectory terminates.

use std::collections::VecDeque;

use crate::seq::{EnvDecision, Environment, TokenId, TokenSequence, Vocabulary};

use super::TaskError;

/// Deterministic calculator environment over a digit-level vocabulary.
#[derive(Debug, Clone, Copy, Default)]
pub struct CalculatorEnv;

enum SimState {
    /// policy chooses; queue of pending forced tokens is empty
    Free,
    /// forced tokens pending
    Forcing(VecDeque<TokenId>),
    /// a malformed clause occurred; the trajectory must end here
    Rejected,
}

fn digit_of(vocab: &Vocabulary, id: TokenId) -> Option<i64> {
    vocab.token(id).parse::<i64>().ok().filter(|d| (0..=9).contains(d))
}

fn is_plus(vocab: &Vocabulary, id: TokenId) -> bool {
    vocab.token(id) == "+"
}

fn is_minus(vocab: &Vocabulary, id: TokenId) -> bool {
    vocab.token(id) == "-"
}

fn is_equals(vocab: &Vocabulary, id: TokenId) -> bool {
    vocab.token(id) == "="
}

/// Renders an integer as digit tokens, with a leading minus token when
/// negative.
pub fn int_tokens(vocab: &Vocabulary, value: i64) -> Vec<TokenId> {
    let mut out = Vec::new();
    if value < 0 {
        out.push(vocab.id_of("-").expect("minus token"));
    }
    for ch in value.abs().to_string().chars() {
        out.push(
            vocab
                .id_of(&ch.to_string())
                .expect("digit token in vocabulary"),
        );
    }
    out
}

/// Evaluates the clause ending just before position `eq_pos` (the `=`):
/// scans back over digits and operators, groups digits into integers, and
/// applies the final operator to the last two terms. None for malformed
/// clauses.
fn eval_clause(vocab: &Vocabulary, tokens: &[TokenId], eq_pos: usize) -> Option<i64> {
    let mut start = eq_pos;
    while start > 0 {
        let id = tokens[start - 1];
        if digit_of(vocab, id).is_some() || is_plus(vocab, id) || is_minus(vocab, id) {
            start -= 1;
        } else {
            break;
        }
    }
    let clause = &tokens[start..eq_pos];
    // parse into signed terms and binary operators
    let mut terms: Vec<i64> = Vec::new();
    let mut ops: Vec<i64> = Vec::new(); // +1 for plus, -1 for minus
    let mut i = 0;
    let mut expect_term = true;
    while i < clause.len() {
        if expect_term {
            let mut sign = 1i64;
            if is_minus(vocab, clause[i]) {
                sign = -1;
                i += 1;
            }
            let mut digits_seen = false;
            let mut value = 0i64;
            while i < clause.len() {
                let Some(d) = digit_of(vocab, clause[i]) else { break };
                value = value * 10 + d;
                digits_seen = true;
                i += 1;
            }
            if !digits_seen {
                return None;
            }
            terms.push(sign * value);
            expect_term = false;
        } else {
            if is_plus(vocab, clause[i]) {
                ops.push(1);
            } else if is_minus(vocab, clause[i]) {
                ops.push(-1);
            } else {
                return None;
            }
            i += 1;
            expect_term = true;
        }
    }
    if expect_term || terms.len() < 2 {
        return None;
    }
    let b = terms.pop()?;
    let a = terms.pop()?;
    let op = ops.pop()?;
    Some(a + op * b)
}

/// Replays the generated prefix and returns the environment state after it.
/// Tokens matching a pending forced token consume it; others while forcing
/// never arise from sampling.
fn simulate(vocab: &Vocabulary, prefix: &[TokenId]) -> SimState {
    let mut queue: VecDeque<TokenId> = VecDeque::new();
    for (pos, &id) in prefix.iter().enumerate() {
        if let Some(&front) = queue.front() {
            if id == front {
                queue.pop_front();
                continue;
            }
            // inconsistent with forcing; treat as terminal rejection
            return SimState::Rejected;
        }
        if is_equals(vocab, id) {
            match eval_clause(vocab, prefix, pos) {
                Some(result) => queue = int_tokens(vocab, result).into(),
                None => return SimState::Rejected,
            }
        }
    }
    if queue.is_empty() {
        SimState::Free
    } else {
        SimState::Forcing(queue)
    }
}

impl Environment for CalculatorEnv {
    fn decide(&self, vocab: &Vocabulary, prefix: &[TokenId]) -> EnvDecision {
        match simulate(vocab, prefix) {
            SimState::Free => EnvDecision::Free,
            SimState::Forcing(queue) => EnvDecision::Force(*queue.front().expect("nonempty")),
            SimState::Rejected => EnvDecision::Reject,
        }
    }
}

/// Applies one calculator evaluation to a sequence whose last token is `=`,
/// appending the environment-forced result tokens.
pub fn calculator_step(
    vocab: &Vocabulary,
    seq: &TokenSequence,
) -> Result<TokenSequence, TaskError> {
    seq.ids()
        .last()
        .copied()
        .filter(|&id| is_equals(vocab, id))
        .ok_or(TaskError::NotAtEquals)?;
    let result = eval_clause(vocab, seq.ids(), seq.len() - 1).ok_or(TaskError::CalculatorReject)?;
    let mut out = TokenSequence::from_ids(seq.ids().to_vec());
    for id in int_tokens(vocab, result) {
        out.push(id);
    }
    Ok(out)
}

/// Completes a rationale written without calculator outputs by inserting
/// the forced result tokens after every `=`. Tokens that already match the
/// pending forced output are kept as-is, so completed rationales pass
/// through unchanged. Errors on malformed clauses.
pub fn complete_rationale(
    vocab: &Vocabulary,
    rationale: &TokenSequence,
) -> Result<TokenSequence, TaskError> {
    let mut out: Vec<TokenId> = Vec::new();
    let mut queue: VecDeque<TokenId> = VecDeque::new();
    for &id in rationale.ids() {
        if let Some(&front) = queue.front() {
            if id == front {
                queue.pop_front();
                out.push(id);
                continue;
            }
            while let Some(forced) = queue.pop_front() {
                out.push(forced);
            }
        }
        out.push(id);
        if is_equals(vocab, id) {
            let result =
                eval_clause(vocab, &out, out.len() - 1).ok_or(TaskError::CalculatorReject)?;
            queue = int_tokens(vocab, result).into();
        }
    }
    while let Some(forced) = queue.pop_front() {
        out.push(forced);
    }
    Ok(TokenSequence::terminated_from(out))
}
