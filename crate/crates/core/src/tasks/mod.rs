//! Task families: reward definitions, the calculator tool environment,
//! arithmetic dataset generation, posterior-predictive prediction, decoding
//! baselines, and the expectation-maximization loop.

pub mod arithmetic;
pub mod calculator;
pub mod decode;
pub mod em;
pub mod predictive;

use std::collections::HashMap;
use std::sync::Arc;

use thiserror::Error;

use crate::lm::{LmError, TabularLm};
use crate::objective::RewardFn;
use crate::policy::env_decisions;
use crate::scalar::Scalar;
use crate::seq::{EnvDecision, SeqError, TokenId, TokenSequence};

use calculator::CalculatorEnv;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("sequence does not end with '='")]
    NotAtEquals,
    #[error("malformed clause: calculator rejection")]
    CalculatorReject,
    #[error("reward temperature must be positive")]
    BadTemperature,
    #[error("empty sample list")]
    EmptySamples,
    #[error("no decodable answer in any sample")]
    NoDecodableAnswer,
    #[error("dataset parse failure at line {line}: {msg}")]
    DatasetParse { line: usize, msg: String },
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Seq(#[from] SeqError),
}

/// Named built-in constraint predicates for constrained generation.
#[derive(Debug, Clone)]
pub enum Constraint {
    /// Sequence must contain the token.
    MustContain(TokenId),
    /// Sequence must be no longer than the bound.
    MaxLength(usize),
    /// Rendered sequence (without the stop marker) must match the pattern:
    /// a whitespace-joined list of token alternatives, where `*` matches any
    /// single token and a trailing `...` allows any suffix.
    TokenPattern(Vec<String>),
}

impl Constraint {
    pub fn satisfied<T: Scalar>(&self, teacher: &TabularLm<T>, z: &TokenSequence) -> bool {
        match self {
            Constraint::MustContain(id) => z.ids().contains(id),
            Constraint::MaxLength(n) => z.len() <= *n,
            Constraint::TokenPattern(slots) => {
                let open_ended = slots.last().is_some_and(|s| s == "...");
                let fixed = if open_ended {
                    &slots[..slots.len() - 1]
                } else {
                    &slots[..]
                };
                if open_ended {
                    if z.len() < fixed.len() {
                        return false;
                    }
                } else if z.len() != fixed.len() {
                    return false;
                }
                fixed.iter().zip(z.ids()).all(|(slot, &id)| {
                    slot == "*"
                        || slot
                            .split('|')
                            .any(|alt| alt == teacher.vocab().token(id))
                })
            }
        }
    }
}

/// One reward family instance.
#[derive(Debug, Clone)]
pub enum RewardKind<T: Scalar> {
    /// log-reward table over terminal id-lists; absent entries use `floor`
    /// (negative infinity meaning zero reward).
    TargetDensity {
        table: Arc<HashMap<Vec<TokenId>, T>>,
        floor: T,
    },
    /// R(z) = p_LM(z stop | x)^(1 / task_temp)
    TemperedContinuation { x: TokenSequence, task_temp: T },
    /// R(z) = p_LM(x z y): the unnormalized posterior numerator
    Infill { x: TokenSequence, y: TokenSequence },
    /// R(z) = p_LM(x z)^alpha * p_LM(z)^beta
    Contrastive {
        x: TokenSequence,
        alpha: T,
        beta: T,
    },
    /// R(z) = p_LM(z) * [constraint satisfied]
    Constrained { constraint: Constraint },
    /// R(z) = p_LM(x z y) over the tool-completed rationale; calculator
    /// rejection means zero reward
    ArithmeticJoint { x: TokenSequence, y: TokenSequence },
}

/// A task-defined unnormalized density over terminal sequences, scored by
/// the teacher, with the training reward temperature applied as a final
/// 1/T exponent.
#[derive(Debug, Clone)]
pub struct RewardSpec<T: Scalar> {
    teacher: Arc<TabularLm<T>>,
    kind: RewardKind<T>,
    temperature: T,
}

impl<T: Scalar> RewardSpec<T> {
    pub fn new(teacher: Arc<TabularLm<T>>, kind: RewardKind<T>) -> Self {
        Self {
            teacher,
            kind,
            temperature: T::one(),
        }
    }

    pub fn target_density(
        teacher: Arc<TabularLm<T>>,
        table: HashMap<Vec<TokenId>, T>,
        floor: T,
    ) -> Self {
        Self::new(
            teacher,
            RewardKind::TargetDensity {
                table: Arc::new(table),
                floor,
            },
        )
    }

    pub fn tempered_continuation(
        teacher: Arc<TabularLm<T>>,
        x: TokenSequence,
        task_temp: T,
    ) -> Self {
        Self::new(teacher, RewardKind::TemperedContinuation { x, task_temp })
    }

    pub fn infill(teacher: Arc<TabularLm<T>>, x: TokenSequence, y: TokenSequence) -> Self {
        Self::new(teacher, RewardKind::Infill { x, y })
    }

    pub fn contrastive(
        teacher: Arc<TabularLm<T>>,
        x: TokenSequence,
        alpha: T,
        beta: T,
    ) -> Self {
        Self::new(teacher, RewardKind::Contrastive { x, alpha, beta })
    }

    pub fn constrained(teacher: Arc<TabularLm<T>>, constraint: Constraint) -> Self {
        Self::new(teacher, RewardKind::Constrained { constraint })
    }

    pub fn arithmetic_joint(
        teacher: Arc<TabularLm<T>>,
        x: TokenSequence,
        y: TokenSequence,
    ) -> Self {
        Self::new(teacher, RewardKind::ArithmeticJoint { x, y })
    }

    pub fn teacher(&self) -> &TabularLm<T> {
        &self.teacher
    }

    pub fn kind(&self) -> &RewardKind<T> {
        &self.kind
    }

    pub fn temperature(&self) -> T {
        self.temperature
    }

    /// Copy with a different training reward temperature.
    pub fn with_temperature(&self, temperature: T) -> Result<Self, TaskError> {
        if !(temperature > T::zero()) {
            return Err(TaskError::BadTemperature);
        }
        let mut spec = self.clone();
        spec.temperature = temperature;
        Ok(spec)
    }

    /// Untempered log R(z).
    pub fn log_reward_raw(&self, z: &TokenSequence) -> T {
        let lp = |r: Result<T, LmError>| r.unwrap_or_else(|_| T::neg_infinity());
        let open = |s: &TokenSequence| TokenSequence::from_ids(s.ids().to_vec());
        match &self.kind {
            RewardKind::TargetDensity { table, floor } => {
                table.get(z.ids()).copied().unwrap_or(*floor)
            }
            RewardKind::TemperedContinuation { x, task_temp } => {
                lp(self.teacher.log_prob_given(x, &z.as_terminated())) / *task_temp
            }
            RewardKind::Infill { x, y } => lp(self.teacher.joint_log_prob(x, &open(z), y)),
            RewardKind::Contrastive { x, alpha, beta } => {
                let joint = lp(self
                    .teacher
                    .joint_log_prob(x, &open(z), &TokenSequence::terminated_from(vec![])));
                let uncond = lp(self.teacher.log_prob_seq(&z.as_terminated()));
                *alpha * joint + *beta * uncond
            }
            RewardKind::Constrained { constraint } => {
                if constraint.satisfied(&self.teacher, z) {
                    lp(self.teacher.log_prob_seq(&z.as_terminated()))
                } else {
                    T::neg_infinity()
                }
            }
            RewardKind::ArithmeticJoint { x, y } => {
                let vocab = self.teacher.vocab();
                match env_decisions(vocab, z, &CalculatorEnv) {
                    Some(decisions) if decisions.last() != Some(&EnvDecision::Reject) => {
                        lp(self.teacher.joint_log_prob(x, &open(z), y))
                    }
                    _ => T::neg_infinity(),
                }
            }
        }
    }
}

impl<T: Scalar> RewardFn<T> for RewardSpec<T> {
    fn log_reward(&self, z: &TokenSequence) -> T {
        self.log_reward_raw(z) / self.temperature
    }
}

/// Condition sequence for policies conditioned on both sides of an infill:
/// x, a separator token, then the y tokens.
pub fn infill_condition(
    x: &TokenSequence,
    y: &TokenSequence,
    separator: TokenId,
) -> TokenSequence {
    let mut ids = x.ids().to_vec();
    ids.push(separator);
    ids.extend_from_slice(y.ids());
    TokenSequence::from_ids(ids)
}
