//! Experiment runner: teacher fitting, policy training, evaluation, oracle
//! dumps, ablation sweeps, and baselines, as subcommands over config files.

mod commands;
mod config;
mod evaluate;
mod manifest;
mod report;
mod task_setup;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{
    cmd_ablate, cmd_baseline, cmd_eval, cmd_fit_teacher, cmd_oracle, cmd_train, AblateArgs,
    BaselineArgs, EvalArgs, FitTeacherArgs, OracleArgs, TrainArgs, TrainMethod,
};

#[derive(Parser)]
#[command(
    name = "seqflow",
    about = "distribution-matching fine-tuning of tabular sequence samplers",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the tabular teacher on a whitespace-tokenized corpus.
    FitTeacher {
        /// Corpus file: one sequence per line.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        order: usize,
        #[arg(long, default_value_t = 0.1)]
        alpha: f64,
        #[arg(long)]
        out: PathBuf,
        /// Optional held-out file; prints its log-likelihood.
        #[arg(long)]
        validation: Option<PathBuf>,
        /// Generate this many arithmetic demonstrations per operand count
        /// instead of reading a corpus.
        #[arg(long)]
        gen_arith_demos: Option<usize>,
        #[arg(long, default_value = "2,3")]
        gen_arith_operands: String,
        #[arg(long, default_value_t = 0.0)]
        gen_arith_corrupt: f64,
        #[arg(long, default_value_t = 0)]
        gen_arith_seed: u64,
        /// Also write the generated demonstrations as a dataset file.
        #[arg(long)]
        corpus_out: Option<PathBuf>,
    },
    /// Train a policy against the configured task reward.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Task override (otherwise the config's task key).
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        teacher: PathBuf,
        /// Demonstrations file for buffer seeding.
        #[arg(long)]
        demos: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a policy checkpoint and write a report.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        n_samples: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the exact target distribution dump for the configured task.
    Oracle {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// One training run per swept value; consolidated table.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        demos: Option<PathBuf>,
        /// key=v1,v2,v3 over config keys.
        #[arg(long)]
        sweep: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reward-maximizing and decoding baselines, eval-compatible reports.
    Baseline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        demos: Option<PathBuf>,
        /// policy_gradient | greedy | temperature | top_k | nucleus | beam
        #[arg(long)]
        method: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Configuration introspection.
    Config {
        /// Print every config key with its default value.
        #[arg(long)]
        dump_defaults: bool,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::FitTeacher {
            corpus,
            order,
            alpha,
            out,
            validation,
            gen_arith_demos,
            gen_arith_operands,
            gen_arith_corrupt,
            gen_arith_seed,
            corpus_out,
        } => cmd_fit_teacher(&FitTeacherArgs {
            corpus,
            order,
            alpha,
            out,
            validation,
            gen_arith_demos,
            gen_arith_operands,
            gen_arith_corrupt,
            gen_arith_seed,
            corpus_out,
        }),
        Command::Train {
            config,
            task,
            teacher,
            demos,
            out,
        } => cmd_train(&TrainArgs {
            config,
            task,
            teacher,
            demos,
            out,
            method: TrainMethod::Balance,
        })
        .map(|summary| {
            println!("{}", serde_json::to_string(&summary).expect("summary json"));
        }),
        Command::Eval {
            config,
            task,
            teacher,
            policy,
            n_samples,
            out,
        } => cmd_eval(&EvalArgs {
            config,
            task,
            teacher,
            policy,
            n_samples,
            out,
        }),
        Command::Oracle {
            config,
            task,
            teacher,
            out,
        } => cmd_oracle(&OracleArgs {
            config,
            task,
            teacher,
            out,
        }),
        Command::Ablate {
            config,
            task,
            teacher,
            demos,
            sweep,
            out,
        } => cmd_ablate(&AblateArgs {
            config,
            task,
            teacher,
            demos,
            sweep,
            out,
        }),
        Command::Baseline {
            config,
            task,
            teacher,
            demos,
            method,
            out,
        } => cmd_baseline(&BaselineArgs {
            config,
            task,
            teacher,
            demos,
            method,
            out,
        }),
        Command::Config { dump_defaults } => {
            if dump_defaults {
                print!("{}", config::Config::default().dump());
            } else {
                eprintln!("nothing to do; try --dump-defaults");
            }
            Ok(())
        }
    }
}

/// 0 success, 2 config/input error, 3 numeric failure, 4 enumeration cap.
fn exit_code_for(err: &anyhow::Error) -> u8 {
    use seqflow_core::oracle::OracleError;
    use seqflow_core::policy::PolicyError;
    use seqflow_core::training::TrainError;
    for cause in err.chain() {
        if let Some(oracle) = cause.downcast_ref::<OracleError>() {
            if matches!(oracle, OracleError::CapExceeded { .. }) {
                return 4;
            }
        }
        if let Some(train) = cause.downcast_ref::<TrainError>() {
            if matches!(train, TrainError::NonFiniteLoss { .. }) {
                return 3;
            }
        }
        if let Some(policy) = cause.downcast_ref::<PolicyError>() {
            if matches!(
                policy,
                PolicyError::NonFiniteLoss | PolicyError::NonFiniteGradient
            ) {
                return 3;
            }
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
