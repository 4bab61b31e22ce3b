//! Subcommand implementations. Exit-code policy: 0 success, 2 config/input
//! errors, 3 numeric failures, 4 enumeration cap exceeded.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use seqflow_core::lm::TabularLm;
use seqflow_core::oracle::exact_target;
use seqflow_core::policy::DeltaPolicy;
use seqflow_core::seq::{TokenSequence, Vocabulary};
use seqflow_core::tasks::arithmetic::{arithmetic_vocab, format_dataset_line};
use seqflow_core::tasks::decode::{decode_baselines, DecodeMethod, LmPolicy};
use seqflow_core::training::{
    seed_buffer, train, train_policy_gradient, derive_seed, ReplayBuffer, TrainOutcome,
};

use crate::config::{Config, Task};
use crate::evaluate::{continuation_baseline_report, evaluate_policy, summary_divergences};
use crate::manifest::{determinism_digest, metrics_jsonl, RunManifest};
use crate::task_setup::{arithmetic_teacher_corpus, build};

fn read_corpus(vocab_source: &Path) -> Result<(Arc<Vocabulary>, Vec<TokenSequence>)> {
    let text = std::fs::read_to_string(vocab_source)
        .with_context(|| format!("cannot read corpus {}", vocab_source.display()))?;
    // vocabulary: distinct tokens in first-appearance order
    let mut tokens: Vec<String> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (no, line) in text.lines().enumerate() {
        for tok in line.split_whitespace() {
            if tok == seqflow_core::seq::STOP_TOKEN {
                continue;
            }
            if seen.insert(tok.to_string()) {
                tokens.push(tok.to_string());
            }
        }
        let _ = no;
    }
    if tokens.is_empty() {
        bail!("corpus {} contains no tokens", vocab_source.display());
    }
    let vocab = Arc::new(Vocabulary::new(tokens)?);
    let mut corpus = Vec::new();
    for (no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let seq = vocab
            .parse_seq(line)
            .with_context(|| format!("corpus line {}", no + 1))?;
        corpus.push(seq);
    }
    Ok((vocab, corpus))
}

pub struct FitTeacherArgs {
    pub corpus: Option<PathBuf>,
    pub order: usize,
    pub alpha: f64,
    pub out: PathBuf,
    pub validation: Option<PathBuf>,
    /// Generate an arithmetic demonstration corpus instead of reading one.
    pub gen_arith_demos: Option<usize>,
    pub gen_arith_operands: String,
    pub gen_arith_corrupt: f64,
    pub gen_arith_seed: u64,
    pub corpus_out: Option<PathBuf>,
}

pub fn cmd_fit_teacher(args: &FitTeacherArgs) -> Result<()> {
    let (vocab, corpus) = match (&args.corpus, args.gen_arith_demos) {
        (Some(path), None) => read_corpus(path)?,
        (None, Some(count)) => {
            let mut cfg = Config::default();
            cfg.seed = args.gen_arith_seed;
            cfg.arith_train_operands = args.gen_arith_operands.clone();
            cfg.arith_train_count = count;
            cfg.arith_eval_count = 0;
            cfg.arith_corrupt_fraction = args.gen_arith_corrupt;
            let (problems, _) = crate::task_setup::arithmetic_problem_sets(&cfg)?;
            let corpus = arithmetic_teacher_corpus(&cfg, &problems)?;
            if let Some(out) = &args.corpus_out {
                let vocab = arithmetic_vocab();
                let lines: Vec<String> = problems
                    .iter()
                    .map(|p| format_dataset_line(&vocab, p))
                    .collect();
                std::fs::write(out, lines.join("\n") + "\n")?;
            }
            (arithmetic_vocab(), corpus)
        }
        _ => bail!("provide exactly one of --corpus or --gen-arith-demos"),
    };
    let lm = TabularLm::<f64>::fit_ngram(vocab, &corpus, args.order, args.alpha)?;
    std::fs::write(&args.out, lm.write_checkpoint())
        .with_context(|| format!("writing {}", args.out.display()))?;
    println!(
        "fitted teacher: order {}, {} contexts, vocabulary {}",
        lm.order(),
        lm.context_count(),
        lm.vocab().size()
    );
    if let Some(validation) = &args.validation {
        let text = std::fs::read_to_string(validation)?;
        let mut total = 0.0;
        let mut count = 0usize;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let mut seq = lm.vocab().parse_seq(line)?;
            if !seq.is_terminated() {
                seq.terminate();
            }
            total += lm.log_prob_seq(&seq)?;
            count += 1;
        }
        println!("held-out log-likelihood: {total:.6} over {count} sequences");
    }
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct TrainSummary {
    pub task: String,
    pub final_loss: f64,
    pub mean_log_reward: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kl: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tv: Option<f64>,
    pub buffer_size: usize,
    pub seeded: usize,
    pub seed_skipped: usize,
    pub steps: usize,
    pub determinism_digest: String,
}

pub struct TrainArgs {
    pub config: PathBuf,
    pub task: Option<String>,
    pub teacher: PathBuf,
    pub demos: Option<PathBuf>,
    pub out: PathBuf,
    pub method: TrainMethod,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMethod {
    Balance,
    PolicyGradient,
}

fn load_config(path: &Path, task_override: Option<&str>) -> Result<Config> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))?;
    let mut cfg = Config::parse(&text)?;
    if let Some(task) = task_override {
        Task::parse(task)?;
        cfg.task_name = task.to_string();
    }
    cfg.task()?;
    Ok(cfg)
}

fn load_teacher(path: &Path) -> Result<Arc<TabularLm<f64>>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read teacher checkpoint {}", path.display()))?;
    Ok(Arc::new(TabularLm::read_checkpoint(&text)?))
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainSummary> {
    let cfg = load_config(&args.config, args.task.as_deref())?;
    let teacher = load_teacher(&args.teacher)?;
    let setup = build(&cfg, teacher, args.demos.as_deref())?;
    std::fs::create_dir_all(&args.out)?;

    let mut manifest = RunManifest::new(
        match args.method {
            TrainMethod::Balance => "train",
            TrainMethod::PolicyGradient => "baseline policy_gradient",
        },
        cfg.seed,
        cfg.dump(),
    );
    manifest.add_input(&args.config)?;
    manifest.add_input(&args.teacher)?;
    if let Some(demos) = &args.demos {
        manifest.add_input(demos)?;
    }
    for name in ["metrics.jsonl", "policy.ckpt", "summary.json"] {
        manifest.add_output(&args.out.join(name));
    }
    manifest.write(&args.out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x1217, 0));
    let policy = DeltaPolicy::init(
        Arc::clone(&setup.teacher),
        cfg.policy_config(),
        &mut rng,
    )?;

    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity);
    let seeded = seed_buffer(&mut buffer, &setup.seed_items);

    let outcome: TrainOutcome<f64> = match args.method {
        TrainMethod::Balance => train(
            policy,
            &setup.items,
            setup.env.as_dyn(),
            &cfg.train_config(),
            buffer,
        )?,
        TrainMethod::PolicyGradient => train_policy_gradient(
            policy,
            &setup.items,
            setup.env.as_dyn(),
            &cfg.train_config(),
            cfg.pg_log_space_rewards,
        )?,
    };

    std::fs::write(args.out.join("metrics.jsonl"), metrics_jsonl(&outcome.metrics))?;
    std::fs::write(args.out.join("policy.ckpt"), outcome.policy.write_checkpoint())?;

    let (kl, tv) = summary_divergences(&setup, &outcome.policy, &cfg)?;
    let last = outcome.metrics.last();
    let summary = TrainSummary {
        task: setup.task.name().to_string(),
        final_loss: last.map(|m| m.loss).unwrap_or(0.0),
        mean_log_reward: last.map(|m| m.mean_log_reward).unwrap_or(f64::NEG_INFINITY),
        kl,
        tv,
        buffer_size: outcome.buffer.total_len(),
        seeded: seeded.seeded,
        seed_skipped: seeded.skipped,
        steps: outcome.metrics.len(),
        determinism_digest: determinism_digest(&outcome.metrics),
    };
    std::fs::write(
        args.out.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(summary)
}

pub struct EvalArgs {
    pub config: PathBuf,
    pub task: Option<String>,
    pub teacher: PathBuf,
    pub policy: PathBuf,
    pub n_samples: Option<usize>,
    pub out: PathBuf,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let cfg = load_config(&args.config, args.task.as_deref())?;
    let teacher = load_teacher(&args.teacher)?;
    let setup = build(&cfg, Arc::clone(&teacher), None)?;
    let text = std::fs::read_to_string(&args.policy)
        .with_context(|| format!("cannot read policy checkpoint {}", args.policy.display()))?;
    let policy = DeltaPolicy::read_checkpoint(&text, teacher)?;
    let n = args.n_samples.unwrap_or(cfg.eval_samples);
    let report = evaluate_policy(&setup, &policy, &cfg, "policy", n)?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(&args.out, serde_json::to_string_pretty(&report)?)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

pub struct OracleArgs {
    pub config: PathBuf,
    pub task: Option<String>,
    pub teacher: PathBuf,
    pub out: PathBuf,
}

pub fn cmd_oracle(args: &OracleArgs) -> Result<()> {
    let cfg = load_config(&args.config, args.task.as_deref())?;
    let teacher = load_teacher(&args.teacher)?;
    let setup = build(&cfg, teacher, None)?;
    let reward = setup.oracle_reward.with_temperature(cfg.reward_temp_end)?;
    let target = exact_target(
        &reward,
        setup.teacher.vocab(),
        0,
        cfg.max_len,
        cfg.enumeration_cap,
    )?;
    std::fs::write(&args.out, target.dump(setup.teacher.vocab()))?;
    println!(
        "wrote {} terminals (log partition {:.6})",
        target.support_size, target.log_partition
    );
    Ok(())
}

pub struct AblateArgs {
    pub config: PathBuf,
    pub task: Option<String>,
    pub teacher: PathBuf,
    pub demos: Option<PathBuf>,
    pub sweep: String,
    pub out: PathBuf,
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let base = load_config(&args.config, args.task.as_deref())?;
    let (key, values) = args
        .sweep
        .split_once('=')
        .context("sweep must be key=v1,v2,...")?;
    // validate the key against the config schema up front
    Config::parse(&format!(
        "{key}={}",
        values.split(',').next().unwrap_or_default()
    ))
    .with_context(|| format!("unknown or invalid sweep key {key:?}"))?;
    std::fs::create_dir_all(&args.out)?;
    let mut rows: Vec<(String, Option<TrainSummary>, Option<crate::report::Report>)> =
        Vec::new();
    for value in values.split(',') {
        let mut cfg_text = base.dump();
        cfg_text.push_str(&format!("{key}={value}\n"));
        let run_dir = args.out.join(format!("{key}_{value}"));
        std::fs::create_dir_all(&run_dir)?;
        let cfg_path = run_dir.join("config.txt");
        std::fs::write(&cfg_path, &cfg_text)?;
        let train_args = TrainArgs {
            config: cfg_path.clone(),
            task: None,
            teacher: args.teacher.clone(),
            demos: args.demos.clone(),
            out: run_dir.clone(),
            method: TrainMethod::Balance,
        };
        // partial table still written when a run fails
        match cmd_train(&train_args) {
            Ok(summary) => {
                let cfg = load_config(&cfg_path, None)?;
                let teacher = load_teacher(&args.teacher)?;
                let setup = build(&cfg, Arc::clone(&teacher), args.demos.as_deref())?;
                let text = std::fs::read_to_string(run_dir.join("policy.ckpt"))?;
                let policy = DeltaPolicy::read_checkpoint(&text, teacher)?;
                let report =
                    evaluate_policy(&setup, &policy, &cfg, "policy", cfg.eval_samples)?;
                rows.push((value.to_string(), Some(summary), Some(report)));
            }
            Err(err) => {
                eprintln!("run {key}={value} failed: {err:#}");
                rows.push((value.to_string(), None, None));
            }
        }
    }
    let mut table = String::from("value\tfinal_loss\tkl\ttv\taccuracy\n");
    let mut accuracies: Vec<(String, f64)> = Vec::new();
    for (value, summary, report) in &rows {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "-".into());
        let acc = report.as_ref().and_then(|r| r.accuracy_overall);
        if let Some(a) = acc {
            accuracies.push((value.clone(), a));
        }
        table.push_str(&format!(
            "{value}\t{}\t{}\t{}\t{}\n",
            fmt(summary.as_ref().map(|s| s.final_loss)),
            fmt(summary.as_ref().and_then(|s| s.kl)),
            fmt(summary.as_ref().and_then(|s| s.tv)),
            fmt(acc),
        ));
    }
    // trend check over the swept values, in sweep order
    if accuracies.len() >= 2 {
        let monotone = accuracies.windows(2).all(|w| w[1].1 >= w[0].1 - 1e-12);
        table.push_str(&format!("# accuracy monotone non-decreasing: {monotone}\n"));
    }
    std::fs::write(args.out.join("table.tsv"), &table)?;
    print!("{table}");
    Ok(())
}

pub struct BaselineArgs {
    pub config: PathBuf,
    pub task: Option<String>,
    pub teacher: PathBuf,
    pub demos: Option<PathBuf>,
    pub method: String,
    pub out: PathBuf,
}

pub fn cmd_baseline(args: &BaselineArgs) -> Result<()> {
    let cfg = load_config(&args.config, args.task.as_deref())?;
    let teacher = load_teacher(&args.teacher)?;
    let setup = build(&cfg, Arc::clone(&teacher), args.demos.as_deref())?;
    std::fs::create_dir_all(&args.out)?;
    let report = match args.method.as_str() {
        "policy_gradient" => {
            let train_args = TrainArgs {
                config: args.config.clone(),
                task: args.task.clone(),
                teacher: args.teacher.clone(),
                demos: args.demos.clone(),
                out: args.out.clone(),
                method: TrainMethod::PolicyGradient,
            };
            cmd_train(&train_args)?;
            let text = std::fs::read_to_string(args.out.join("policy.ckpt"))?;
            let policy = DeltaPolicy::read_checkpoint(&text, Arc::clone(&teacher))?;
            evaluate_policy(&setup, &policy, &cfg, "policy_gradient", cfg.eval_samples)?
        }
        method @ ("greedy" | "temperature" | "top_k" | "nucleus" | "beam") => {
            let decode_method = match method {
                "greedy" => DecodeMethod::Greedy,
                "temperature" => DecodeMethod::Temperature(cfg.eval_temperature.max(1e-9)),
                "top_k" => DecodeMethod::TopK(cfg.eval_samples.max(1)),
                "nucleus" => DecodeMethod::Nucleus(0.9),
                "beam" => DecodeMethod::Beam(cfg.eval_samples.max(1)),
                _ => unreachable!(),
            };
            let lm_policy = LmPolicy::new(Arc::clone(&teacher), cfg.max_len);
            let prompts = match &setup.eval {
                crate::task_setup::EvalData::Continuation(p) => p.clone(),
                _ => vec![setup.items[0].condition.clone()],
            };
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0xBA5E, 0));
            let mut per_prompt = Vec::new();
            for x in &prompts {
                per_prompt.push(decode_baselines(
                    &lm_policy,
                    x,
                    decode_method,
                    cfg.eval_samples,
                    &mut rng,
                )?);
            }
            continuation_baseline_report(&setup, &cfg, method, per_prompt)?
        }
        other => bail!(
            "unknown baseline method {other:?} (expected policy_gradient, greedy, \
             temperature, top_k, nucleus, or beam)"
        ),
    };
    std::fs::write(args.out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}
