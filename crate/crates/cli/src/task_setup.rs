//! Builds training items, environments, seed demonstrations, and evaluation
//! payloads for each task family from the parsed configuration.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use seqflow_core::lm::TabularLm;
use seqflow_core::seq::{Environment, FreeEnv, TokenSequence};
use seqflow_core::tasks::arithmetic::{
    arithmetic_vocab, corrupt_rationale, gen_arithmetic_dataset, parse_dataset_line,
    ArithmeticProblem,
};
use seqflow_core::tasks::calculator::{complete_rationale, CalculatorEnv};
use seqflow_core::tasks::{infill_condition, Constraint, RewardSpec};
use seqflow_core::training::{derive_seed, TrainItem};

use crate::config::{Config, Task};

/// Environment selector (the calculator applies to arithmetic only).
#[derive(Debug, Clone, Copy)]
pub enum TaskEnv {
    Free,
    Calculator,
}

impl TaskEnv {
    pub fn as_dyn(&self) -> &'static dyn Environment {
        match self {
            TaskEnv::Free => &FreeEnv,
            TaskEnv::Calculator => &CalculatorEnv,
        }
    }
}

/// Task-specific evaluation payload.
pub enum EvalData {
    /// Nothing beyond the oracle target (rng, constrained, contrastive).
    Target,
    /// Prompts to continue.
    Continuation(Vec<TokenSequence>),
    /// (x, y) pairs whose posterior is enumerable.
    Infill(Vec<(TokenSequence, TokenSequence)>),
    /// Problems grouped by operand count.
    Arithmetic(Vec<ArithmeticProblem>),
    /// (x, label) pairs.
    LatentClassify(Vec<(TokenSequence, TokenSequence)>),
}

/// Everything a run needs, derived from config + teacher + files.
pub struct TaskSetup {
    pub task: Task,
    pub teacher: Arc<TabularLm<f64>>,
    pub items: Vec<TrainItem<f64>>,
    pub env: TaskEnv,
    /// Demonstrations for buffer seeding: (condition, z, reward).
    pub seed_items: Vec<(TokenSequence, TokenSequence, RewardSpec<f64>)>,
    /// Reward used for oracle dumps and report targets; differs from the
    /// training reward only where training adds a table floor.
    pub oracle_reward: RewardSpec<f64>,
    pub eval: EvalData,
}

fn read_lines(path: &str) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read dataset file {path}"))?;
    Ok(text
        .lines()
        .map(str::to_string)
        .filter(|l| !l.trim().is_empty())
        .collect())
}

/// Parses either tab-separated (x, z?, y) lines or plain prompt lines.
fn load_triples(
    teacher: &TabularLm<f64>,
    path: &str,
) -> Result<Vec<(TokenSequence, Option<TokenSequence>, TokenSequence)>> {
    let mut out = Vec::new();
    for (no, line) in read_lines(path)?.iter().enumerate() {
        if line.contains('\t') {
            out.push(parse_dataset_line(teacher.vocab(), line, no + 1)?);
        } else {
            let x = teacher
                .vocab()
                .parse_seq(line)
                .with_context(|| format!("{path} line {}", no + 1))?;
            out.push((x, None, TokenSequence::terminated_from(vec![])));
        }
    }
    if out.is_empty() {
        bail!("dataset file {path} is empty");
    }
    Ok(out)
}

fn parse_constraint(cfg: &Config, teacher: &TabularLm<f64>) -> Result<Constraint> {
    let (kind, arg) = cfg
        .constraint
        .split_once(':')
        .with_context(|| format!("constraint {:?} must be <kind>:<arg>", cfg.constraint))?;
    Ok(match kind {
        "must-contain-token" => Constraint::MustContain(
            teacher
                .vocab()
                .id_of(arg)
                .with_context(|| format!("constraint token {arg:?} not in vocabulary"))?,
        ),
        "max-length" => Constraint::MaxLength(arg.parse().context("max-length wants an integer")?),
        "token-pattern" => {
            Constraint::TokenPattern(arg.split_whitespace().map(str::to_string).collect())
        }
        other => bail!("unknown constraint kind {other:?}"),
    })
}

/// Uniform log-reward table over every single-token terminal whose token
/// parses as an integer.
fn integer_table(teacher: &TabularLm<f64>) -> HashMap<Vec<usize>, f64> {
    let mut table = HashMap::new();
    for (id, tok) in teacher.vocab().tokens().iter().enumerate() {
        if tok.parse::<i64>().is_ok() {
            table.insert(vec![id], 0.0);
        }
    }
    table
}

/// Generates the training and evaluation problem sets from config.
pub fn arithmetic_problem_sets(
    cfg: &Config,
) -> Result<(Vec<ArithmeticProblem>, Vec<ArithmeticProblem>)> {
    let vocab = arithmetic_vocab();
    let range = cfg.arith_digit_min..=cfg.arith_digit_max;
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for n in Config::operand_counts(&cfg.arith_train_operands)? {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0xA17, n as u64));
        let mut all = gen_arithmetic_dataset(
            &vocab,
            n,
            cfg.arith_train_count + cfg.arith_eval_count,
            range.clone(),
            &mut rng,
        );
        let eval_split = all.split_off(all.len().saturating_sub(cfg.arith_eval_count));
        train.extend(all);
        eval.extend(eval_split);
    }
    for n in Config::operand_counts(&cfg.arith_eval_operands)? {
        if Config::operand_counts(&cfg.arith_train_operands)?.contains(&n) {
            continue; // in-distribution split already produced above
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0xA18, n as u64));
        eval.extend(gen_arithmetic_dataset(
            &vocab,
            n,
            cfg.arith_eval_count,
            range.clone(),
            &mut rng,
        ));
    }
    Ok((train, eval))
}

/// Demo corpus for teacher fitting: tool-completed full sequences, with an
/// optional corrupted fraction (miscalibration knob).
pub fn arithmetic_teacher_corpus(
    cfg: &Config,
    problems: &[ArithmeticProblem],
) -> Result<Vec<TokenSequence>> {
    let vocab = arithmetic_vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0xC0, 0));
    let n_corrupt = (problems.len() as f64 * cfg.arith_corrupt_fraction).round() as usize;
    let mut corpus = Vec::with_capacity(problems.len());
    for (i, p) in problems.iter().enumerate() {
        let problem = if i < n_corrupt {
            corrupt_rationale(&vocab, p, &mut rng)
        } else {
            p.clone()
        };
        match problem.full_sequence(&vocab) {
            Ok(seq) => corpus.push(seq),
            Err(_) => corpus.push(p.full_sequence(&vocab)?),
        }
    }
    Ok(corpus)
}

pub fn build(
    cfg: &Config,
    teacher: Arc<TabularLm<f64>>,
    demos_path: Option<&Path>,
) -> Result<TaskSetup> {
    let task = cfg.task()?;
    match task {
        Task::Rng => {
            let table = integer_table(&teacher);
            if table.is_empty() {
                bail!("rng task needs a teacher whose tokens are integers");
            }
            let training = RewardSpec::target_density(
                Arc::clone(&teacher),
                table.clone(),
                cfg.table_floor,
            );
            let oracle_reward = RewardSpec::target_density(
                Arc::clone(&teacher),
                table,
                f64::NEG_INFINITY,
            );
            Ok(TaskSetup {
                task,
                teacher,
                items: vec![TrainItem {
                    condition: TokenSequence::empty(),
                    reward: training,
                }],
                env: TaskEnv::Free,
                seed_items: Vec::new(),
                oracle_reward,
                eval: EvalData::Target,
            })
        }
        Task::Constrained => {
            let constraint = parse_constraint(cfg, &teacher)?;
            let reward = RewardSpec::constrained(Arc::clone(&teacher), constraint);
            Ok(TaskSetup {
                task,
                teacher,
                items: vec![TrainItem {
                    condition: TokenSequence::empty(),
                    reward: reward.clone(),
                }],
                env: TaskEnv::Free,
                seed_items: Vec::new(),
                oracle_reward: reward,
                eval: EvalData::Target,
            })
        }
        Task::Contrastive => {
            let x = if cfg.dataset.is_empty() {
                TokenSequence::empty()
            } else {
                load_triples(&teacher, &cfg.dataset)?[0].0.clone()
            };
            let reward = RewardSpec::contrastive(
                Arc::clone(&teacher),
                x.clone(),
                cfg.contrast_alpha,
                cfg.contrast_beta,
            );
            Ok(TaskSetup {
                task,
                teacher,
                items: vec![TrainItem {
                    condition: x,
                    reward: reward.clone(),
                }],
                env: TaskEnv::Free,
                seed_items: Vec::new(),
                oracle_reward: reward,
                eval: EvalData::Target,
            })
        }
        Task::Continuation => {
            if cfg.dataset.is_empty() {
                bail!("continuation task needs dataset= (one prompt per line)");
            }
            let prompts: Vec<TokenSequence> = load_triples(&teacher, &cfg.dataset)?
                .into_iter()
                .map(|(x, _, _)| x)
                .collect();
            let items: Vec<TrainItem<f64>> = prompts
                .iter()
                .map(|x| TrainItem {
                    condition: x.clone(),
                    reward: RewardSpec::tempered_continuation(
                        Arc::clone(&teacher),
                        x.clone(),
                        cfg.task_temperature,
                    ),
                })
                .collect();
            let oracle_reward = items[0].reward.clone();
            Ok(TaskSetup {
                task,
                teacher,
                items,
                env: TaskEnv::Free,
                seed_items: Vec::new(),
                oracle_reward,
                eval: EvalData::Continuation(prompts),
            })
        }
        Task::Infill | Task::LatentClassify => {
            if cfg.dataset.is_empty() {
                bail!("{} task needs dataset= (x TAB z? TAB y)", task.name());
            }
            let sep = teacher
                .vocab()
                .id_of(&cfg.separator_token)
                .with_context(|| {
                    format!("separator token {:?} not in vocabulary", cfg.separator_token)
                })?;
            let triples = load_triples(&teacher, &cfg.dataset)?;
            let mut items = Vec::new();
            let mut seed_items = Vec::new();
            let mut pairs = Vec::new();
            for (x, z, y) in &triples {
                let condition = if task == Task::Infill {
                    infill_condition(x, y, sep)
                } else {
                    x.clone()
                };
                let reward = RewardSpec::infill(Arc::clone(&teacher), x.clone(), y.clone());
                if let Some(z) = z {
                    seed_items.push((condition.clone(), z.as_terminated(), reward.clone()));
                }
                items.push(TrainItem { condition, reward });
                pairs.push((x.clone(), y.clone()));
            }
            seed_items.truncate(cfg.seed_demos);
            let oracle_reward = items[0].reward.clone();
            let eval_pairs = if cfg.eval_dataset.is_empty() {
                pairs.clone()
            } else {
                load_triples(&teacher, &cfg.eval_dataset)?
                    .into_iter()
                    .map(|(x, _, y)| (x, y))
                    .collect()
            };
            Ok(TaskSetup {
                task,
                teacher,
                items,
                env: TaskEnv::Free,
                seed_items,
                oracle_reward,
                eval: if task == Task::Infill {
                    EvalData::Infill(eval_pairs)
                } else {
                    EvalData::LatentClassify(eval_pairs)
                },
            })
        }
        Task::Arithmetic => {
            let vocab = arithmetic_vocab();
            if teacher.vocab() != vocab.as_ref() {
                bail!("arithmetic task needs a teacher fitted on the arithmetic vocabulary");
            }
            let (train_problems, eval_problems) = if cfg.dataset.is_empty() {
                arithmetic_problem_sets(cfg)?
            } else {
                let train: Vec<ArithmeticProblem> = load_triples(&teacher, &cfg.dataset)?
                    .into_iter()
                    .enumerate()
                    .map(|(no, (x, z, y))| problem_from_parts(&teacher, no, x, z, y))
                    .collect::<Result<_>>()?;
                let eval = if cfg.eval_dataset.is_empty() {
                    train.clone()
                } else {
                    load_triples(&teacher, &cfg.eval_dataset)?
                        .into_iter()
                        .enumerate()
                        .map(|(no, (x, z, y))| problem_from_parts(&teacher, no, x, z, y))
                        .collect::<Result<_>>()?
                };
                (train, eval)
            };
            let items: Vec<TrainItem<f64>> = train_problems
                .iter()
                .map(|p| TrainItem {
                    condition: p.question.clone(),
                    reward: RewardSpec::arithmetic_joint(
                        Arc::clone(&teacher),
                        p.question.clone(),
                        p.answer.clone(),
                    ),
                })
                .collect();
            // demos: explicit file > generated training problems
            let demo_problems: Vec<ArithmeticProblem> = match demos_path {
                Some(path) => load_triples(&teacher, &path.display().to_string())?
                    .into_iter()
                    .enumerate()
                    .map(|(no, (x, z, y))| problem_from_parts(&teacher, no, x, z, y))
                    .collect::<Result<_>>()?,
                None => train_problems.clone(),
            };
            let mut seed_items = Vec::new();
            for p in demo_problems.iter().take(cfg.seed_demos) {
                let Ok(completed) = complete_rationale(&vocab, &p.rationale) else {
                    continue;
                };
                seed_items.push((
                    p.question.clone(),
                    completed,
                    RewardSpec::arithmetic_joint(
                        Arc::clone(&teacher),
                        p.question.clone(),
                        p.answer.clone(),
                    ),
                ));
            }
            let oracle_reward = items[0].reward.clone();
            Ok(TaskSetup {
                task,
                teacher,
                items,
                env: TaskEnv::Calculator,
                seed_items,
                oracle_reward,
                eval: EvalData::Arithmetic(eval_problems),
            })
        }
    }
}

fn problem_from_parts(
    teacher: &TabularLm<f64>,
    no: usize,
    x: TokenSequence,
    z: Option<TokenSequence>,
    y: TokenSequence,
) -> Result<ArithmeticProblem> {
    let vocab = teacher.vocab();
    let rendered = vocab.render(&x);
    let body = rendered
        .strip_prefix("Question: ")
        .and_then(|r| r.strip_suffix(" = ? Answer:"))
        .with_context(|| format!("line {}: question {rendered:?} not in expected form", no + 1))?;
    let mut operands: Vec<i64> = Vec::new();
    let mut operators = Vec::new();
    let mut pending_sign = 1i64;
    let mut current: Option<i64> = None;
    for tok in body.split_whitespace() {
        if let Ok(d) = tok.parse::<i64>() {
            current = Some(current.unwrap_or(0) * 10 + d);
        } else {
            let op = match tok {
                "+" => seqflow_core::tasks::arithmetic::BinOp::Add,
                "-" => seqflow_core::tasks::arithmetic::BinOp::Sub,
                other => bail!("line {}: unexpected token {other:?} in question", no + 1),
            };
            match current.take() {
                Some(v) => {
                    operands.push(pending_sign * v);
                    pending_sign = 1;
                    operators.push(op);
                }
                None => {
                    // leading sign
                    pending_sign = match op {
                        seqflow_core::tasks::arithmetic::BinOp::Sub => -1,
                        seqflow_core::tasks::arithmetic::BinOp::Add => 1,
                    };
                    continue;
                }
            }
        }
    }
    if let Some(v) = current {
        operands.push(pending_sign * v);
    }
    if operands.len() != operators.len() + 1 || operands.is_empty() {
        bail!("line {}: malformed expression {body:?}", no + 1);
    }
    let mut problem = ArithmeticProblem::new(vocab, operands, operators);
    if let Some(z) = z {
        problem.rationale = z;
    }
    let _ = y;
    Ok(problem)
}
