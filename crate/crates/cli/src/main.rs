//! `mtdnn`: generate data, train, distil and compare from the command line.
//!
//! Exit codes: 0 success, 2 data or configuration error, 64 usage error.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] mtdnn::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 64,
            CliError::Core(_) | CliError::Io(_) => 2,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "mtdnn", version, about = "Multi-task training and ensemble distillation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by training commands. Precedence: flag > file > default;
/// `MTDNN_SEED` replaces the default seed.
#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one setting, e.g. `--set base_lr=0.0005`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Shorthand for `--set epoch_max=N`.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the four-task synthetic suite as corpus files.
    GenData {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Train, dev and test examples per task.
        #[arg(long, default_value = "2000,200,200")]
        sizes: String,
    },
    /// Train all tasks jointly.
    TrainMtl {
        #[arg(long)]
        data_dir: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        /// Start from this model instead of a fresh one.
        #[arg(long, conflicts_with = "resume")]
        init: Option<PathBuf>,
        /// Continue an interrupted run from its checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop once this many epochs are done; the checkpoint can be resumed.
        #[arg(long)]
        stop_after: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Fine-tune teacher candidates for one task and keep the best.
    TrainTeachers {
        #[arg(long)]
        task: String,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long, default_value_t = 6)]
        candidates: usize,
        #[arg(long, default_value_t = 3)]
        keep: usize,
        /// Candidate dropout rates, comma separated.
        #[arg(long, default_value = "0.1,0.2,0.3")]
        dropout_rates: String,
        /// Worker threads for candidate training.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Average teacher predictions into a soft-target file.
    ExportSoft {
        /// Directory written by train-teachers. Repeatable.
        #[arg(long = "ensemble-dir", required = true)]
        ensemble_dirs: Vec<PathBuf>,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a student on hard labels plus teacher soft targets.
    Distill {
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        soft: Option<PathBuf>,
        #[arg(long)]
        init: PathBuf,
        /// Comma-separated tasks that use soft targets; may be empty.
        #[arg(long, default_value = "")]
        teacher_tasks: String,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Fine-tune a model on one task (a new task gets a fresh head).
    Finetune {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        task: String,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Evaluate a model on one split of every task it has a head for.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long, default_value = "dev")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-task primary metric of two models and their difference.
    Compare {
        #[arg(long)]
        model_a: PathBuf,
        #[arg(long)]
        model_b: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long, default_value = "dev")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    use commands as c;
    match cli.command {
        Command::GenData { seed, out_dir, sizes } => c::gen_data(seed, &out_dir, &sizes),
        Command::TrainMtl {
            data_dir,
            config,
            init,
            resume,
            stop_after,
            out,
            metrics,
        } => c::train_mtl(&c::TrainMtlArgs {
            data_dir,
            config,
            init,
            resume,
            stop_after,
            out,
            metrics,
        }),
        Command::TrainTeachers {
            task,
            base,
            data_dir,
            candidates,
            keep,
            dropout_rates,
            jobs,
            config,
            out,
        } => c::train_teachers(&c::TeacherArgs {
            task,
            base,
            data_dir,
            candidates,
            keep,
            dropout_rates,
            jobs,
            config,
            out,
        }),
        Command::ExportSoft {
            ensemble_dirs,
            data_dir,
            out,
        } => c::export_soft(&ensemble_dirs, &data_dir, &out),
        Command::Distill {
            data_dir,
            soft,
            init,
            teacher_tasks,
            config,
            out,
            metrics,
        } => c::distill(&c::DistillArgs {
            data_dir,
            soft,
            init,
            teacher_tasks,
            config,
            out,
            metrics,
        }),
        Command::Finetune {
            model,
            data_dir,
            task,
            config,
            out,
            metrics,
        } => c::finetune(&model, &data_dir, &task, &config, &out, metrics.as_deref()),
        Command::Eval {
            model,
            data_dir,
            split,
            out,
        } => c::eval(&model, &data_dir, &split, &out),
        Command::Compare {
            model_a,
            model_b,
            data_dir,
            split,
            out,
        } => c::compare(&model_a, &model_b, &data_dir, &split, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 64 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
