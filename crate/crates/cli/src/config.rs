//! Flat key=value run configuration. Unknown keys are errors; every default
//! is printable via `seqflow config --dump-defaults`.

use std::fmt::Write as _;

use anyhow::{bail, Context, Result};
use seqflow_core::policy::PolicyConfig;
use seqflow_core::training::{Schedule, TrainConfig};

/// Task selector for train/eval/oracle/baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Rng,
    Continuation,
    Infill,
    Arithmetic,
    Constrained,
    Contrastive,
    LatentClassify,
}

impl Task {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(match text {
            "rng" => Task::Rng,
            "continuation" => Task::Continuation,
            "infill" => Task::Infill,
            "arithmetic" => Task::Arithmetic,
            "constrained" => Task::Constrained,
            "contrastive" => Task::Contrastive,
            "latent-classify" => Task::LatentClassify,
            other => bail!(
                "unknown task {other:?} (expected rng, continuation, infill, arithmetic, \
                 constrained, contrastive, or latent-classify)"
            ),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Task::Rng => "rng",
            Task::Continuation => "continuation",
            Task::Infill => "infill",
            Task::Arithmetic => "arithmetic",
            Task::Constrained => "constrained",
            Task::Contrastive => "contrastive",
            Task::LatentClassify => "latent-classify",
        }
    }
}

macro_rules! config_fields {
    ($(($key:literal, $field:ident, $ty:ty, $default:expr, $doc:literal)),+ $(,)?) => {
        /// Run configuration; field defaults mirror the published
        /// hyperparameter tables where one exists.
        #[derive(Debug, Clone, PartialEq)]
        pub struct Config {
            $(#[doc = $doc] pub $field: $ty,)+
        }

        impl Default for Config {
            fn default() -> Self {
                Self { $($field: $default,)+ }
            }
        }

        impl Config {
            fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $($key => {
                        self.$field = value
                            .parse::<$ty>()
                            .with_context(|| format!("invalid value {value:?} for key {key}"))?;
                    })+
                    _ => bail!("unknown config key {key:?}"),
                }
                Ok(())
            }

            /// Every key=value pair, in declaration order.
            pub fn dump(&self) -> String {
                let mut out = String::new();
                $(writeln!(out, "{}={}", $key, self.$field).expect("write to string");)+
                out
            }
        }
    };
}

config_fields![
    ("task", task_name, String, "rng".to_string(), "task family"),
    ("seed", seed, u64, 0, "root seed; all randomness derives from it"),
    ("steps", steps, usize, 1000, "training steps (one batch each)"),
    ("batch_size", batch_size, usize, 16, "trajectories per step"),
    ("grad_accum", grad_accum, usize, 32, "gradient accumulation steps per update"),
    ("learning_rate", learning_rate, f64, 0.0001, "AdamW learning rate"),
    ("warmup_updates", warmup_updates, usize, 0, "linear learning-rate warmup updates"),
    ("weight_decay", weight_decay, f64, 0.0, "AdamW decoupled weight decay"),
    ("entropy_bonus", entropy_bonus, f64, 0.0, "entropy bonus coefficient (policy-gradient baseline)"),
    ("mix_on_policy", mix_on_policy, f64, 0.5, "batch fraction drawn on-policy"),
    ("mix_tempered", mix_tempered, f64, 0.25, "batch fraction drawn from the tempered policy"),
    ("mix_replay", mix_replay, f64, 0.25, "batch fraction drawn from the replay buffer"),
    ("behavior_temp_min", behavior_temp_min, f64, 0.5, "minimum behavior temperature"),
    ("behavior_temp_max", behavior_temp_max, f64, 2.0, "maximum behavior temperature"),
    ("reward_temp_start", reward_temp_start, f64, 1.1, "reward temperature at step 0"),
    ("reward_temp_end", reward_temp_end, f64, 0.5, "reward temperature after the horizon"),
    ("reward_temp_horizon", reward_temp_horizon, usize, 150, "steps over which reward temperature anneals"),
    ("buffer_capacity", buffer_capacity, usize, 50, "replay buffer capacity per condition"),
    ("reward_proportional_replay", reward_proportional_replay, bool, false, "sample replay entries proportionally to reward"),
    ("min_len", min_len, usize, 5, "minimum generation length (stop masked below)"),
    ("max_len", max_len, usize, 20, "maximum generation length (stop forced at)"),
    ("context_window", context_window, usize, 4, "trailing tokens visible to the adjustment network"),
    ("hidden", hidden, usize, 64, "adjustment network hidden width"),
    ("enumeration_cap", enumeration_cap, usize, 2_000_000, "oracle enumeration ceiling"),
    ("eval_temperature", eval_temperature, f64, 0.1, "sampling temperature at evaluation"),
    ("eval_samples", eval_samples, usize, 10, "samples aggregated per evaluation query"),
    ("eval_max_y_len", eval_max_y_len, usize, 16, "answer decode length cap"),
    ("table_floor", table_floor, f64, -14.0, "log-reward floor for terminals absent from a target table"),
    ("task_temperature", task_temperature, f64, 0.875, "target temperature of the tempered-continuation reward"),
    ("contrast_alpha", contrast_alpha, f64, 1.0, "conditional likelihood exponent (contrastive reward)"),
    ("contrast_beta", contrast_beta, f64, -0.5, "unconditional likelihood exponent (contrastive reward)"),
    ("constraint", constraint, String, "must-contain-token:0".to_string(), "constraint spec: must-contain-token:<tok> | max-length:<n> | token-pattern:<slots>"),
    ("separator_token", separator_token, String, "<SEP>".to_string(), "token separating x and y in infill conditions"),
    ("dataset", dataset, String, String::new(), "dataset file path (tab-separated x, z?, y; or one prompt per line)"),
    ("eval_dataset", eval_dataset, String, String::new(), "held-out dataset file path"),
    ("seed_demos", seed_demos, usize, 50, "demonstrations inserted into the replay buffer before training"),
    ("pg_log_space_rewards", pg_log_space_rewards, bool, true, "policy-gradient baseline uses log rewards"),
    ("arith_train_operands", arith_train_operands, String, "2,3".to_string(), "operand counts generated for training"),
    ("arith_eval_operands", arith_eval_operands, String, "2,3,4".to_string(), "operand counts generated for evaluation"),
    ("arith_train_count", arith_train_count, usize, 1000, "training problems per operand count"),
    ("arith_eval_count", arith_eval_count, usize, 50, "evaluation problems per operand count"),
    ("arith_digit_min", arith_digit_min, i64, 0, "smallest operand digit"),
    ("arith_digit_max", arith_digit_max, i64, 9, "largest operand digit"),
    ("arith_corrupt_fraction", arith_corrupt_fraction, f64, 0.0, "fraction of teacher demo rationales corrupted (miscalibration knob)"),
];

impl Config {
    /// Parses a flat key=value file; `#` starts a comment, blank lines are
    /// skipped, unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .with_context(|| format!("line {}: expected key=value, got {raw:?}", no + 1))?;
            cfg.set(key.trim(), value.trim())
                .with_context(|| format!("line {}", no + 1))?;
        }
        Ok(cfg)
    }

    pub fn task(&self) -> Result<Task> {
        Task::parse(&self.task_name)
    }

    pub fn train_config(&self) -> TrainConfig<f64> {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            grad_accum: self.grad_accum,
            learning_rate: self.learning_rate,
            warmup_updates: self.warmup_updates,
            mix_on_policy: self.mix_on_policy,
            mix_tempered: self.mix_tempered,
            mix_replay: self.mix_replay,
            behavior_temp_min: self.behavior_temp_min,
            behavior_temp_max: self.behavior_temp_max,
            reward_temp: Schedule {
                start: self.reward_temp_start,
                end: self.reward_temp_end,
                horizon: self.reward_temp_horizon,
            },
            buffer_capacity: self.buffer_capacity,
            reward_proportional_replay: self.reward_proportional_replay,
            weight_decay: self.weight_decay,
            entropy_bonus: self.entropy_bonus,
            seed: self.seed,
        }
    }

    pub fn policy_config(&self) -> PolicyConfig {
        PolicyConfig {
            context_window: self.context_window,
            hidden: self.hidden,
            min_len: self.min_len,
            max_len: self.max_len,
        }
    }

    pub fn operand_counts(text: &str) -> Result<Vec<usize>> {
        text.split(',')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .with_context(|| format!("invalid operand count {p:?}"))
            })
            .collect()
    }
}
