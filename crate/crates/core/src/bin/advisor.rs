use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use advisor_core::commands::{self, CommandError, EvalOptions};
use advisor_core::config::RunConfig;
use advisor_core::environments::ChrfConfig;

/// Train and evaluate advisor policies that steer a frozen student model
/// through natural-language advice.
#[derive(Parser)]
#[command(name = "advisor", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an advisor; writes config.json, metrics.jsonl and checkpoints/.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the configured output directory.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Continue from a checkpoint of the same run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the eval split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Student id (the training student or a transfer student).
        #[arg(long)]
        student: Option<String>,
        /// Argmax advice instead of sampled advice.
        #[arg(long)]
        greedy: bool,
        #[arg(long)]
        mc_samples: Option<usize>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Best static advice under the training budget, and the unadvised student.
    Baseline {
        #[arg(long)]
        config: PathBuf,
        /// Score-call budget; defaults to what training would use.
        #[arg(long)]
        budget: Option<u64>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Evaluate a checkpoint against every configured student.
    Transfer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Correctness with and without an out-of-domain advisor.
    Robustness {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Config of the target environment.
        #[arg(long)]
        config: PathBuf,
        /// Seed for the unadvised arm; defaults to the run seed (matched).
        #[arg(long)]
        unadvised_seed: Option<u64>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Strong versus weak initialization.
    Ablation {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0.8)]
        threshold: f64,
        /// Epoch multiplier for the extra long weak run (1 disables it).
        #[arg(long, default_value_t = 6)]
        weak_multiplier: usize,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// chrF of each hypothesis line against its reference line.
    Chrf {
        hyp: PathBuf,
        reference: PathBuf,
        #[arg(long, default_value_t = 6)]
        order: usize,
        #[arg(long, default_value_t = 2.0)]
        beta: f64,
        #[arg(long)]
        whitespace: bool,
    },
    /// Write a config's generated tasks and latents as JSONL/JSON.
    ExportDataset {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(path: &PathBuf) -> Result<RunConfig, CommandError> {
    Ok(RunConfig::load(path)?)
}

fn run(cli: Cli) -> Result<(), CommandError> {
    match cli.command {
        Command::Train { config, output, resume } => {
            let mut cfg = load(&config)?;
            if let Some(o) = output {
                cfg.output_dir = o;
            }
            let s = commands::cmd_train(&cfg, resume.as_deref())?;
            println!("{} updates; run directory {}", s.updates, s.run_dir.display());
        }
        Command::Eval {
            checkpoint,
            config,
            student,
            greedy,
            mc_samples,
            report,
        } => {
            let cfg = load(&config)?;
            let opts = EvalOptions {
                student: student.as_deref(),
                greedy,
                mc_samples,
                report: report.as_deref(),
            };
            commands::cmd_eval(&checkpoint, &cfg, &opts)?;
        }
        Command::Baseline { config, budget, report } => {
            commands::cmd_baseline(&load(&config)?, budget, report.as_deref())?;
        }
        Command::Transfer {
            checkpoint,
            config,
            report,
        } => {
            commands::cmd_transfer(&checkpoint, &load(&config)?, report.as_deref())?;
        }
        Command::Robustness {
            checkpoint,
            config,
            unadvised_seed,
            report,
        } => {
            commands::cmd_robustness(&checkpoint, &load(&config)?, unadvised_seed, report.as_deref())?;
        }
        Command::Ablation {
            config,
            threshold,
            weak_multiplier,
            report,
        } => {
            commands::cmd_ablation(&load(&config)?, threshold, weak_multiplier, report.as_deref())?;
        }
        Command::Chrf {
            hyp,
            reference,
            order,
            beta,
            whitespace,
        } => {
            let cfg = ChrfConfig {
                max_ngram_order: order,
                beta,
                whitespace_included: whitespace,
            };
            commands::cmd_chrf(&hyp, &reference, &cfg)?;
        }
        Command::ExportDataset { config, out } => {
            commands::cmd_export_dataset(&load(&config)?, &out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
