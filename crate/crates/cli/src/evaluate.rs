//! Task-specific evaluation: exact divergences against the enumeration
//! oracle where the space is enumerable, accuracy by posterior-predictive
//! majority vote where it is not.

use anyhow::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use seqflow_core::oracle::{
    exact_policy_terminal, exact_target, kl, tv, TerminalDistribution,
};
use seqflow_core::policy::{sample_sequence, DeltaPolicy};
use seqflow_core::seq::{FreeEnv, TokenSequence, TrajectorySource};
use seqflow_core::tasks::arithmetic::parse_answer;
use seqflow_core::tasks::calculator::CalculatorEnv;
use seqflow_core::tasks::decode::continuation_metrics;
use seqflow_core::tasks::predictive::{posterior_predictive, AnswerMode};
use seqflow_core::tasks::{infill_condition, RewardSpec};
use seqflow_core::training::derive_seed;

use crate::config::{Config, Task};
use crate::report::Report;
use crate::task_setup::{EvalData, TaskSetup};

/// Exact target distribution used by reports: the oracle reward at the
/// schedule's final temperature.
pub fn report_target(
    setup: &TaskSetup,
    cfg: &Config,
) -> Result<TerminalDistribution<f64>> {
    let reward = setup.oracle_reward.with_temperature(cfg.reward_temp_end)?;
    Ok(exact_target(
        &reward,
        setup.teacher.vocab(),
        0,
        cfg.max_len,
        cfg.enumeration_cap,
    )?)
}

/// KL/TV of the policy's exact terminal distribution against the target,
/// restricted to the target support (off-support mass reported separately).
pub fn divergence_block(
    policy: &DeltaPolicy<f64>,
    condition: &TokenSequence,
    target: &TerminalDistribution<f64>,
    cap: usize,
    report: &mut Report,
) -> Result<()> {
    let q = exact_policy_terminal(policy, condition, &FreeEnv, cap)?;
    let on_support: f64 = q
        .entries()
        .filter(|(ids, _)| target.prob(ids) > 0.0)
        .map(|(_, p)| p)
        .sum();
    let restricted = q.restricted(|ids| target.prob(ids) > 0.0);
    report.off_support_mass = Some(1.0 - on_support);
    report.tv = Some(tv(&restricted, target));
    report.kl = Some(kl(&restricted, target)?);
    report.terminal_entropy = Some(q.entropy());
    Ok(())
}

/// Runs the task-appropriate evaluation and fills a report.
pub fn evaluate_policy(
    setup: &TaskSetup,
    policy: &DeltaPolicy<f64>,
    cfg: &Config,
    method: &str,
    n_samples: usize,
) -> Result<Report> {
    let mut report = Report::new(setup.task.name(), method, n_samples, cfg.dump());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0xE7A1, 0));
    match (&setup.eval, setup.task) {
        (EvalData::Target, _) => {
            let target = report_target(setup, cfg)?;
            divergence_block(
                policy,
                &setup.items[0].condition,
                &target,
                cfg.enumeration_cap,
                &mut report,
            )?;
            // sampled support check
            let mut valid = 0usize;
            for _ in 0..n_samples {
                let t = sample_sequence(
                    policy,
                    &setup.items[0].condition,
                    1.0,
                    &mut rng,
                    &FreeEnv,
                    TrajectorySource::OnPolicy,
                );
                if target.prob(t.sequence.ids()) > 0.0 {
                    valid += 1;
                }
            }
            report.sample_valid_fraction = Some(valid as f64 / n_samples.max(1) as f64);
        }
        (EvalData::Infill(pairs), _) => {
            let mut tv_sum = 0.0;
            let mut policy_joint = 0.0;
            let mut prior_joint = 0.0;
            let mut joint_count = 0usize;
            let sep = setup
                .teacher
                .vocab()
                .id_of(&cfg.separator_token)
                .expect("separator checked at setup");
            for (x, y) in pairs {
                let spec = RewardSpec::infill(
                    setup.teacher_ref(),
                    x.clone(),
                    y.clone(),
                );
                let posterior = exact_target(
                    &spec,
                    setup.teacher.vocab(),
                    0,
                    cfg.max_len,
                    cfg.enumeration_cap,
                )?;
                let condition = infill_condition(x, y, sep);
                let q = exact_policy_terminal(policy, &condition, &FreeEnv, cfg.enumeration_cap)?;
                tv_sum += tv(&q, &posterior);
                // sampled joint log-probability against prior-conditioned sampling
                for _ in 0..n_samples {
                    let z = sample_sequence(
                        policy,
                        &condition,
                        1.0,
                        &mut rng,
                        &FreeEnv,
                        TrajectorySource::OnPolicy,
                    )
                    .sequence;
                    let lw = spec.log_reward_raw(&z);
                    if lw.is_finite() {
                        policy_joint += lw;
                        joint_count += 1;
                    }
                    let z_prior = sample_sequence(
                        &seqflow_core::tasks::decode::LmPolicy::new(
                            setup.teacher_ref(),
                            cfg.max_len,
                        ),
                        x,
                        1.0,
                        &mut rng,
                        &FreeEnv,
                        TrajectorySource::OnPolicy,
                    )
                    .sequence;
                    let lw = spec.log_reward_raw(&z_prior);
                    if lw.is_finite() {
                        prior_joint += lw;
                    } else {
                        prior_joint += -1e3; // zero-probability prior draw
                    }
                }
            }
            report.mean_tv = Some(tv_sum / pairs.len() as f64);
            let denom = joint_count.max(1) as f64;
            let prior_denom = (pairs.len() * n_samples).max(1) as f64;
            report.mean_joint_log_prob = Some(policy_joint / denom);
            report.prior_joint_log_prob = Some(prior_joint / prior_denom);
            report.joint_margin =
                Some(policy_joint / denom - prior_joint / prior_denom);
        }
        (EvalData::Arithmetic(problems), _) => {
            let mut by_operands: std::collections::BTreeMap<usize, (usize, usize)> =
                std::collections::BTreeMap::new();
            for p in problems {
                let out = posterior_predictive(
                    policy,
                    &setup.teacher,
                    &p.question,
                    n_samples,
                    cfg.eval_temperature,
                    cfg.eval_max_y_len,
                    AnswerMode::Greedy,
                    &CalculatorEnv,
                    &|y| parse_answer(setup.teacher.vocab(), y).map(|v| v.to_string()),
                    &mut rng,
                );
                let correct = match out {
                    Ok(outcome) => {
                        parse_answer(setup.teacher.vocab(), &outcome.prediction)
                            == Some(p.answer_value)
                    }
                    Err(_) => false,
                };
                let entry = by_operands.entry(p.operands.len()).or_insert((0, 0));
                entry.1 += 1;
                if correct {
                    entry.0 += 1;
                }
            }
            let mut table = std::collections::BTreeMap::new();
            let (mut total_ok, mut total) = (0usize, 0usize);
            for (n, (ok, count)) in &by_operands {
                table.insert(*n, *ok as f64 / (*count).max(1) as f64);
                total_ok += ok;
                total += count;
            }
            report.accuracy_by_operands = Some(table);
            report.accuracy_overall = Some(total_ok as f64 / total.max(1) as f64);
        }
        (EvalData::LatentClassify(pairs), _) => {
            let mut correct = 0usize;
            for (x, y) in pairs {
                let out = posterior_predictive(
                    policy,
                    &setup.teacher,
                    x,
                    n_samples,
                    cfg.eval_temperature,
                    cfg.eval_max_y_len,
                    AnswerMode::Greedy,
                    &FreeEnv,
                    &|decoded| Some(setup.teacher.vocab().render(decoded)),
                    &mut rng,
                );
                if let Ok(outcome) = out {
                    if outcome.prediction.ids() == y.ids() {
                        correct += 1;
                    }
                }
            }
            report.accuracy_overall = Some(correct as f64 / pairs.len().max(1) as f64);
        }
        (EvalData::Continuation(prompts), _) => {
            let mut max_ll = 0.0;
            let mut edit = 0.0;
            let mut distinct = 0.0;
            for x in prompts {
                let samples: Vec<TokenSequence> = (0..n_samples)
                    .map(|_| {
                        sample_sequence(
                            policy,
                            x,
                            1.0,
                            &mut rng,
                            &FreeEnv,
                            TrajectorySource::OnPolicy,
                        )
                        .sequence
                    })
                    .collect();
                // score z given the prompt: reuse the tempered reward at T=1
                let spec = RewardSpec::tempered_continuation(
                    setup.teacher_ref(),
                    x.clone(),
                    1.0,
                );
                let best = samples
                    .iter()
                    .map(|z| spec.log_reward_raw(z))
                    .fold(f64::NEG_INFINITY, f64::max);
                let m = continuation_metrics(&samples, &setup.teacher)?;
                max_ll += best;
                edit += m.mean_edit_distance;
                distinct += m.distinct_fraction;
            }
            let n = prompts.len().max(1) as f64;
            report.max_log_likelihood = Some(max_ll / n);
            report.mean_edit_distance = Some(edit / n);
            report.distinct_fraction = Some(distinct / n);
        }
    }
    Ok(report)
}

impl TaskSetup {
    pub fn teacher_ref(&self) -> std::sync::Arc<seqflow_core::lm::TabularLm<f64>> {
        std::sync::Arc::clone(&self.teacher)
    }
}

/// Accuracy of decoding baselines on arithmetic-style problems is not
/// defined (no tool loop); decode baselines report continuation metrics.
pub fn continuation_baseline_report(
    setup: &TaskSetup,
    cfg: &Config,
    method_name: &str,
    sequences_per_prompt: Vec<Vec<TokenSequence>>,
) -> Result<Report> {
    let mut report = Report::new(
        setup.task.name(),
        method_name,
        sequences_per_prompt.first().map(Vec::len).unwrap_or(0),
        cfg.dump(),
    );
    let mut max_ll = 0.0;
    let mut edit = 0.0;
    let mut distinct = 0.0;
    let prompts: Vec<TokenSequence> = match &setup.eval {
        EvalData::Continuation(p) => p.clone(),
        _ => vec![setup.items[0].condition.clone()],
    };
    for (x, samples) in prompts.iter().zip(&sequences_per_prompt) {
        let spec = RewardSpec::tempered_continuation(setup.teacher_ref(), x.clone(), 1.0);
        let best = samples
            .iter()
            .map(|z| spec.log_reward_raw(z))
            .fold(f64::NEG_INFINITY, f64::max);
        let m = continuation_metrics(samples, &setup.teacher)?;
        max_ll += best;
        edit += m.mean_edit_distance;
        distinct += m.distinct_fraction;
    }
    let n = sequences_per_prompt.len().max(1) as f64;
    report.max_log_likelihood = Some(max_ll / n);
    report.mean_edit_distance = Some(edit / n);
    report.distinct_fraction = Some(distinct / n);
    Ok(report)
}

/// Final-KL/TV summary block for train runs on enumerable tasks.
pub fn summary_divergences(
    setup: &TaskSetup,
    policy: &DeltaPolicy<f64>,
    cfg: &Config,
) -> Result<(Option<f64>, Option<f64>)> {
    match setup.task {
        Task::Rng | Task::Constrained | Task::Contrastive => {
            let target = report_target(setup, cfg)?;
            let mut report = Report::default();
            divergence_block(
                policy,
                &setup.items[0].condition,
                &target,
                cfg.enumeration_cap,
                &mut report,
            )?;
            Ok((report.kl, report.tv))
        }
        Task::Infill | Task::LatentClassify => {
            let sep = setup.teacher.vocab().id_of(&cfg.separator_token);
            let pairs = match &setup.eval {
                EvalData::Infill(p) | EvalData::LatentClassify(p) => p.clone(),
                _ => return Ok((None, None)),
            };
            let mut tv_sum = 0.0;
            for (x, y) in &pairs {
                let spec =
                    RewardSpec::infill(setup.teacher_ref(), x.clone(), y.clone());
                let posterior = exact_target(
                    &spec,
                    setup.teacher.vocab(),
                    0,
                    cfg.max_len,
                    cfg.enumeration_cap,
                )?;
                let condition = if setup.task == Task::Infill {
                    infill_condition(x, y, sep.expect("separator checked"))
                } else {
                    x.clone()
                };
                let q =
                    exact_policy_terminal(policy, &condition, &FreeEnv, cfg.enumeration_cap)?;
                tv_sum += tv(&q, &posterior);
            }
            Ok((None, Some(tv_sum / pairs.len().max(1) as f64)))
        }
        _ => Ok((None, None)),
    }
}
