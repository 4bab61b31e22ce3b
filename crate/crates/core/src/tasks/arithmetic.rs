//! Synthetic integer addition/subtraction problems with left-fold rationale
//! demonstrations, tokenized at the level of digits, operators, and fixed
//! keywords.

use std::collections::HashSet;
use std::sync::Arc;

use rand::Rng;

use crate::seq::{TokenId, TokenSequence, VocabRef, Vocabulary};

use super::calculator::{complete_rationale, int_tokens};
use super::TaskError;

/// Binary operator over integers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
}

impl BinOp {
    pub fn token(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
        }
    }

    pub fn apply(self, a: i64, b: i64) -> i64 {
        match self {
            BinOp::Add => a + b,
            BinOp::Sub => a - b,
        }
    }
}

/// Digit-level vocabulary shared by every arithmetic run: digits, operators,
/// the calculator trigger, punctuation, and the question/answer keywords.
pub fn arithmetic_vocab() -> VocabRef {
    let mut tokens: Vec<String> = (0..=9).map(|d| d.to_string()).collect();
    for t in ["+", "-", "=", ",", "?", ".", "Question:", "Answer:", "The", "answer", "is"] {
        tokens.push(t.to_string());
    }
    Arc::new(Vocabulary::new(tokens).expect("static vocabulary"))
}

/// One generated problem with its question/rationale/answer renderings.
#[derive(Debug, Clone)]
pub struct ArithmeticProblem {
    pub operands: Vec<i64>,
    pub operators: Vec<BinOp>,
    /// "Question: a + b - c = ? Answer:"
    pub question: TokenSequence,
    /// Left-fold demonstration without calculator outputs:
    /// "a + b = , r1 - c = , ..."
    pub rationale: TokenSequence,
    pub answer_value: i64,
    /// ". The answer is v ." with the final stop event
    pub answer: TokenSequence,
}

impl ArithmeticProblem {
    pub fn new(vocab: &Vocabulary, operands: Vec<i64>, operators: Vec<BinOp>) -> Self {
        assert_eq!(operators.len() + 1, operands.len());
        let id = |t: &str| vocab.id_of(t).expect("arithmetic token");

        let mut question = vec![id("Question:")];
        question.extend(int_tokens(vocab, operands[0]));
        for (op, operand) in operators.iter().zip(&operands[1..]) {
            question.push(id(op.token()));
            question.extend(int_tokens(vocab, *operand));
        }
        question.extend([id("="), id("?"), id("Answer:")]);

        // left fold: each clause applies the next operand to the running value
        let mut rationale: Vec<TokenId> = Vec::new();
        let mut running = operands[0];
        for (i, (op, operand)) in operators.iter().zip(&operands[1..]).enumerate() {
            if i > 0 {
                rationale.push(id(","));
            }
            rationale.extend(int_tokens(vocab, running));
            rationale.push(id(op.token()));
            rationale.extend(int_tokens(vocab, *operand));
            rationale.push(id("="));
            running = op.apply(running, *operand);
        }
        let answer_value = running;

        let mut answer = vec![id("."), id("The"), id("answer"), id("is")];
        answer.extend(int_tokens(vocab, answer_value));
        answer.push(id("."));

        Self {
            operands,
            operators,
            question: TokenSequence::from_ids(question),
            rationale: TokenSequence::from_ids(rationale),
            answer_value,
            answer: TokenSequence::terminated_from(answer),
        }
    }

    /// Full teacher-corpus line: question, tool-completed rationale, answer.
    pub fn full_sequence(&self, vocab: &Vocabulary) -> Result<TokenSequence, TaskError> {
        let completed = complete_rationale(vocab, &self.rationale)?;
        let mut ids = self.question.ids().to_vec();
        ids.extend_from_slice(completed.ids());
        ids.extend_from_slice(self.answer.ids());
        Ok(TokenSequence::terminated_from(ids))
    }
}

/// Uniformly sampled distinct problems with the given operand count.
/// Duplicates (by question) are rejected, so `count` is capped by the size
/// of the expression space.
pub fn gen_arithmetic_dataset(
    vocab: &Vocabulary,
    n_operands: usize,
    count: usize,
    digit_range: std::ops::RangeInclusive<i64>,
    rng: &mut impl Rng,
) -> Vec<ArithmeticProblem> {
    assert!(n_operands >= 2, "need at least two operands");
    let digits = (digit_range.end() - digit_range.start() + 1) as u128;
    let space = digits.pow(n_operands as u32) * 2u128.pow((n_operands - 1) as u32);
    let target = count.min(space.min(usize::MAX as u128) as usize);
    let mut seen: HashSet<Vec<TokenId>> = HashSet::new();
    let mut out = Vec::with_capacity(target);
    while out.len() < target {
        let operands: Vec<i64> = (0..n_operands)
            .map(|_| rng.gen_range(digit_range.clone()))
            .collect();
        let operators: Vec<BinOp> = (0..n_operands - 1)
            .map(|_| if rng.gen::<bool>() { BinOp::Add } else { BinOp::Sub })
            .collect();
        let problem = ArithmeticProblem::new(vocab, operands, operators);
        if seen.insert(problem.question.ids().to_vec()) {
            out.push(problem);
        }
    }
    out
}

/// Swaps one rationale operand for a random different digit, leaving the
/// question and answer untouched: a wrong-copy corruption for teacher
/// miscalibration experiments.
pub fn corrupt_rationale(
    vocab: &Vocabulary,
    problem: &ArithmeticProblem,
    rng: &mut impl Rng,
) -> ArithmeticProblem {
    let mut corrupted = problem.clone();
    let digit_positions: Vec<usize> = problem
        .rationale
        .ids()
        .iter()
        .enumerate()
        .filter(|(_, &id)| vocab.token(id).parse::<i64>().is_ok())
        .map(|(i, _)| i)
        .collect();
    if let Some(&pos) = digit_positions.get(rng.gen_range(0..digit_positions.len().max(1))) {
        let old = corrupted.rationale.ids()[pos];
        let mut ids = corrupted.rationale.ids().to_vec();
        loop {
            let candidate = vocab.id_of(&rng.gen_range(0..=9).to_string()).unwrap();
            if candidate != old {
                ids[pos] = candidate;
                break;
            }
        }
        corrupted.rationale = TokenSequence::from_ids(ids);
    }
    corrupted
}

/// Integer value spoken by an answer sequence ". The answer is v .", or by
/// any sequence whose trailing tokens spell an integer before a final ".".
pub fn parse_answer(vocab: &Vocabulary, y: &TokenSequence) -> Option<i64> {
    let toks: Vec<&str> = y.ids().iter().map(|&id| vocab.token(id)).collect();
    let is_pos = toks.iter().position(|t| *t == "is")?;
    let mut value: Option<i64> = None;
    let mut sign = 1i64;
    for t in &toks[is_pos + 1..] {
        if *t == "-" && value.is_none() {
            sign = -sign;
        } else if let Ok(d) = t.parse::<i64>() {
            value = Some(value.unwrap_or(0) * 10 + d);
        } else {
            break;
        }
    }
    value.map(|v| sign * v)
}

/// Tab-separated dataset line: question, rationale (may be empty), answer.
pub fn format_dataset_line(vocab: &Vocabulary, problem: &ArithmeticProblem) -> String {
    format!(
        "{}\t{}\t{}",
        vocab.render(&problem.question),
        vocab.render(&problem.rationale),
        vocab.render(&problem.answer)
    )
}

/// Parses a tab-separated (x, z?, y) line.
pub fn parse_dataset_line(
    vocab: &Vocabulary,
    line: &str,
    line_no: usize,
) -> Result<(TokenSequence, Option<TokenSequence>, TokenSequence), TaskError> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 3 {
        return Err(TaskError::DatasetParse {
            line: line_no,
            msg: format!("expected 3 tab-separated fields, found {}", fields.len()),
        });
    }
    let parse = |text: &str| {
        vocab.parse_seq(text).map_err(|e| TaskError::DatasetParse {
            line: line_no,
            msg: e.to_string(),
        })
    };
    let x = parse(fields[0])?;
    let z = if fields[1].trim().is_empty() {
        None
    } else {
        Some(parse(fields[1])?)
    };
    let mut y = parse(fields[2])?;
    if !y.is_terminated() {
        y.terminate();
    }
    Ok((x, z, y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn left_fold_rationale_matches_worked_example() {
        let v = arithmetic_vocab();
        let p = ArithmeticProblem::new(
            &v,
            vec![6, 0, 4, 8],
            vec![BinOp::Sub, BinOp::Sub, BinOp::Sub],
        );
        assert_eq!(p.answer_value, -6);
        assert_eq!(
            v.render(&p.question),
            "Question: 6 - 0 - 4 - 8 = ? Answer:"
        );
        assert_eq!(
            v.render(&p.rationale),
            "6 - 0 = , 6 - 4 = , 2 - 8 ="
        );
        assert_eq!(v.render(&p.answer), ". The answer is - 6 . <STOP>");
        assert_eq!(
            v.render(&p.full_sequence(&v).unwrap()),
            "Question: 6 - 0 - 4 - 8 = ? Answer: 6 - 0 = 6 , 6 - 4 = 2 , 2 - 8 = - 6 . The answer is - 6 . <STOP>"
        );
    }

    #[test]
    fn two_operand_base_case() {
        let v = arithmetic_vocab();
        let p = ArithmeticProblem::new(&v, vec![9, 4], vec![BinOp::Add]);
        assert_eq!(v.render(&p.rationale), "9 + 4 =");
        assert_eq!(p.answer_value, 13);
        assert_eq!(v.render(&p.answer), ". The answer is 1 3 . <STOP>");
    }

    #[test]
    fn generation_is_deterministic_and_correct() {
        let v = arithmetic_vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = gen_arithmetic_dataset(&v, 3, 200, 0..=9, &mut rng);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let b = gen_arithmetic_dataset(&v, 3, 200, 0..=9, &mut rng);
        assert_eq!(a.len(), 200);
        for (pa, pb) in a.iter().zip(&b) {
            assert_eq!(pa.question, pb.question);
        }
        // answers equal independent left-to-right evaluation, always
        for p in &a {
            let mut value = p.operands[0];
            for (op, operand) in p.operators.iter().zip(&p.operands[1..]) {
                value = op.apply(value, *operand);
            }
            assert_eq!(value, p.answer_value);
        }
        // distinct questions
        let distinct: HashSet<_> = a.iter().map(|p| p.question.ids().to_vec()).collect();
        assert_eq!(distinct.len(), a.len());
    }

    #[test]
    fn generation_caps_at_space_size() {
        let v = arithmetic_vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let all = gen_arithmetic_dataset(&v, 2, 10_000, 0..=2, &mut rng);
        assert_eq!(all.len(), 3 * 3 * 2);
    }

    #[test]
    fn answer_parsing() {
        let v = arithmetic_vocab();
        let p = ArithmeticProblem::new(&v, vec![2, 8], vec![BinOp::Sub]);
        assert_eq!(parse_answer(&v, &p.answer), Some(-6));
        let p = ArithmeticProblem::new(&v, vec![9, 9], vec![BinOp::Add]);
        assert_eq!(parse_answer(&v, &p.answer), Some(18));
        assert_eq!(parse_answer(&v, &v.parse_seq(". The answer is").unwrap()), None);
    }

    #[test]
    fn dataset_line_round_trip() {
        let v = arithmetic_vocab();
        let p = ArithmeticProblem::new(&v, vec![1, 2, 3], vec![BinOp::Add, BinOp::Sub]);
        let line = format_dataset_line(&v, &p);
        let (x, z, y) = parse_dataset_line(&v, &line, 1).unwrap();
        assert_eq!(x, p.question);
        assert_eq!(z.unwrap(), p.rationale);
        assert_eq!(y, p.answer);
        assert!(parse_dataset_line(&v, "only\ttwo", 3).is_err());
    }

    #[test]
    fn corruption_changes_one_rationale_digit() {
        let v = arithmetic_vocab();
        let p = ArithmeticProblem::new(&v, vec![5, 3], vec![BinOp::Add]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = corrupt_rationale(&v, &p, &mut rng);
        assert_eq!(c.question, p.question);
        assert_eq!(c.answer, p.answer);
        let diffs = p
            .rationale
            .ids()
            .iter()
            .zip(c.rationale.ids())
            .filter(|(a, b)| a != b)
            .count();
        assert_eq!(diffs, 1);
    }
}
