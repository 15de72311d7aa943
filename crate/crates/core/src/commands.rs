//! Command implementations behind the `advisor` binary. Each command writes
//! a JSON report and prints a readable summary.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::{ConfigError, RunConfig};
use crate::environments::{chrf, export_dataset, ChrfConfig, Environment};
use crate::evalharness::{
    ablation_arm, init_ablation, no_advisor_baseline, robustness_eval, static_baseline, transfer_eval,
    AblationReport, BaselineResult, HarnessError, RobustnessReport, TransferReport,
};
use crate::grpo::GrpoError;
use crate::metrics::MetricsWriter;
use crate::orchestrator::{
    evaluate, train, AdviceSource, EvalConfig, EvalRecord, OrchestratorError, TrainEvent, TrainSetup,
    TrainState,
};
use crate::policy::{InitMode, PolicyConfig};
use crate::students::{build_student, Student, StudentError, StudentSpec};

#[derive(Debug, Error)]
pub enum CommandError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("training stopped on a non-finite loss: {0}")]
    NonFiniteLoss(String),
    #[error(transparent)]
    Orchestrator(#[from] OrchestratorError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Student(#[from] StudentError),
    #[error("{hyp} has {hyp_lines} lines but {reference} has {ref_lines}")]
    LineCountMismatch {
        hyp: String,
        hyp_lines: usize,
        reference: String,
        ref_lines: usize,
    },
    #[error("unknown student {0}")]
    UnknownStudent(String),
    #[error("checkpoint does not fit this environment: {0}")]
    Incompatible(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CommandError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CommandError::Config(_) => 2,
            CommandError::NonFiniteLoss(_) => 3,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CommandError + '_ {
    move |source| CommandError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CommandError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let text = serde_json::to_string_pretty(value).expect("reports always serialize");
    fs::write(path, text + "\n").map_err(io_err(path))
}

fn eval_config(cfg: &RunConfig, mc_samples: Option<usize>) -> EvalConfig {
    EvalConfig {
        mode: cfg.mode,
        mc_samples: mc_samples.unwrap_or(cfg.train.eval_mc),
        seed: cfg.seed,
    }
}

fn environment_and_policy(cfg: &RunConfig) -> Result<(Environment, PolicyConfig), CommandError> {
    let env = cfg.build_environment()?;
    let ids = env.user_ids();
    let policy = cfg.policy_config_for(ids.iter().map(String::as_str));
    Ok((env, policy))
}

fn find_student<'a>(cfg: &'a RunConfig, id: Option<&str>) -> Result<&'a StudentSpec, CommandError> {
    match id {
        None => Ok(&cfg.student),
        Some(id) => std::iter::once(&cfg.student)
            .chain(&cfg.transfer_students)
            .find(|s| s.student_id == id)
            .ok_or_else(|| CommandError::UnknownStudent(id.to_string())),
    }
}

fn check_users(policy: &PolicyConfig, env: &Environment) -> Result<(), CommandError> {
    for u in env.user_ids() {
        if policy.users.get(&u).is_none() {
            return Err(CommandError::Incompatible(format!("user {u} is not in the checkpoint's vocabulary")));
        }
    }
    Ok(())
}

pub fn print_eval(label: &str, rec: &EvalRecord) {
    println!("{label}: mean reward {:.4} ± {:.4} over {} tasks", rec.mean_reward, rec.ci_halfwidth, rec.n_tasks);
    for (user, r) in &rec.per_user {
        println!("  {user:<12} {r:.4}");
    }
    for (name, v) in &rec.components {
        println!("  [{name}] {v:.4}");
    }
    if let (Some(c), Some(hw)) = (rec.correctness_rate, rec.correctness_ci_halfwidth) {
        println!("  correctness {c:.4} ± {hw:.4}");
    }
}

pub struct TrainSummary {
    pub run_dir: PathBuf,
    pub updates: u64,
    pub final_eval: Option<EvalRecord>,
}

/// Train from `cfg` into its output directory. With `resume`, training
/// continues from that checkpoint and metrics are appended.
pub fn cmd_train(cfg: &RunConfig, resume: Option<&Path>) -> Result<TrainSummary, CommandError> {
    let run_dir = cfg.output_dir.clone();
    let ckpt_dir = run_dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(io_err(&ckpt_dir))?;
    write_json(&run_dir.join("config.json"), cfg)?;
    write_json(
        &run_dir.join("run.json"),
        &serde_json::json!({ "package": env!("CARGO_PKG_NAME"), "version": env!("CARGO_PKG_VERSION") }),
    )?;

    let (env, policy) = environment_and_policy(cfg)?;
    let student = build_student(&cfg.student)?;
    let metrics_path = run_dir.join("metrics.jsonl");
    let (start, mut writer) = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.policy != policy {
                return Err(CommandError::Incompatible("policy config differs from the run config".into()));
            }
            (ck.state, MetricsWriter::append(&metrics_path).map_err(io_err(&metrics_path))?)
        }
        None => (
            TrainState::fresh(&policy, cfg.seed),
            MetricsWriter::create(&metrics_path).map_err(io_err(&metrics_path))?,
        ),
    };
    let setup = TrainSetup {
        policy: &policy,
        grpo: &cfg.grpo,
        loop_cfg: &cfg.train,
        mode: cfg.mode,
        env: &env,
        student: student.as_ref(),
    };
    let out = train(&setup, start, &mut |ev| match ev {
        TrainEvent::Update { metrics, .. } => writer.write(metrics).map_err(|e| e.to_string()),
        TrainEvent::Checkpoint { state, last } => {
            let ck = Checkpoint {
                policy: policy.clone(),
                state: state.clone(),
            };
            let name = format!("update-{:06}.json", state.update);
            ck.save(&ckpt_dir.join(name)).map_err(|e| e.to_string())?;
            if last {
                ck.save(&ckpt_dir.join("final.json")).map_err(|e| e.to_string())?;
            }
            Ok(())
        }
    })?;
    if let Some(GrpoError::NonFiniteLoss(msg)) = out.aborted {
        return Err(CommandError::NonFiniteLoss(msg));
    }
    if let Some(e) = &out.final_eval {
        write_json(&run_dir.join("eval_report.json"), e)?;
        print_eval("final greedy evaluation", e);
    }
    Ok(TrainSummary {
        run_dir,
        updates: out.state.update,
        final_eval: out.final_eval,
    })
}

pub struct EvalOptions<'a> {
    pub student: Option<&'a str>,
    pub greedy: bool,
    pub mc_samples: Option<usize>,
    pub report: Option<&'a Path>,
}

/// Evaluate a checkpoint on the eval split of `cfg`'s environment.
pub fn cmd_eval(checkpoint: &Path, cfg: &RunConfig, opts: &EvalOptions<'_>) -> Result<EvalRecord, CommandError> {
    let ck = Checkpoint::load(checkpoint)?;
    let env = cfg.build_environment()?;
    check_users(&ck.policy, &env)?;
    let student = build_student(find_student(cfg, opts.student)?)?;
    let source = if opts.greedy {
        AdviceSource::Greedy(&ck.policy, &ck.state.params)
    } else {
        AdviceSource::Sampled(&ck.policy, &ck.state.params)
    };
    let rec = evaluate(source, &env, student.as_ref(), env.eval(), &eval_config(cfg, opts.mc_samples))?;
    let report = opts
        .report
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.output_dir.join("eval_report.json"));
    write_json(&report, &rec)?;
    print_eval(&format!("{} ({})", checkpoint.display(), student.spec().student_id), &rec);
    Ok(rec)
}

#[derive(Debug, Serialize)]
pub struct BaselineReport {
    pub budget: u64,
    pub static_advice: BaselineResult,
    pub no_advice: EvalRecord,
}

/// Best static advice under the training run's score budget (or `budget`),
/// and the unadvised student.
pub fn cmd_baseline(cfg: &RunConfig, budget: Option<u64>, report: Option<&Path>) -> Result<BaselineReport, CommandError> {
    let (env, policy) = environment_and_policy(cfg)?;
    let student = build_student(&cfg.student)?;
    let budget = budget.unwrap_or_else(|| cfg.training_score_calls());
    let ecfg = eval_config(cfg, None);
    let static_advice = static_baseline(&policy, &env, student.as_ref(), env.train(), env.eval(), budget, &ecfg)?;
    let no_advice = no_advisor_baseline(&env, student.as_ref(), env.eval(), &ecfg)?;
    println!(
        "static advice \"{}\": eval {:.4} ± {:.4} (train {:.4}, {} of {budget} score calls)",
        static_advice.best_fixed_action.rendered_text,
        static_advice.eval_mean_reward,
        static_advice.eval_ci_halfwidth,
        static_advice.train_mean_reward,
        static_advice.reward_calls_used
    );
    print_eval("no advice", &no_advice);
    let out = BaselineReport {
        budget,
        static_advice,
        no_advice,
    };
    write_json(&report.map(Path::to_path_buf).unwrap_or_else(|| cfg.output_dir.join("baseline_report.json")), &out)?;
    Ok(out)
}

/// Evaluate one checkpoint against the training student and every transfer
/// student.
pub fn cmd_transfer(checkpoint: &Path, cfg: &RunConfig, report: Option<&Path>) -> Result<TransferReport, CommandError> {
    let ck = Checkpoint::load(checkpoint)?;
    let env = cfg.build_environment()?;
    check_users(&ck.policy, &env)?;
    let students: Vec<StudentSpec> = std::iter::once(cfg.student.clone())
        .chain(cfg.transfer_students.iter().cloned())
        .collect();
    let rep = transfer_eval(&ck.policy, &ck.state.params, &env, &students, env.eval(), &eval_config(cfg, None))?;
    println!("{:<16} {:>8} {:>8}", "student", "reward", "±95%");
    for row in &rep.rows {
        println!("{:<16} {:>8.4} {:>8.4}", row.student_id, row.eval_mean_reward, row.ci_halfwidth);
    }
    write_json(&report.map(Path::to_path_buf).unwrap_or_else(|| cfg.output_dir.join("transfer_report.json")), &rep)?;
    Ok(rep)
}

/// Apply a checkpoint trained elsewhere to `cfg`'s environment and compare
/// correctness with and without its advice. `unadvised_seed` defaults to the
/// run seed (matched streams).
pub fn cmd_robustness(
    checkpoint: &Path,
    cfg: &RunConfig,
    unadvised_seed: Option<u64>,
    report: Option<&Path>,
) -> Result<RobustnessReport, CommandError> {
    let ck = Checkpoint::load(checkpoint)?;
    let env = cfg.build_environment()?;
    check_users(&ck.policy, &env)?;
    let student = build_student(&cfg.student)?;
    let ecfg = eval_config(cfg, None);
    let rep = robustness_eval(
        &ck.policy,
        &ck.state.params,
        &env,
        student.as_ref(),
        env.eval(),
        &ecfg,
        unadvised_seed.unwrap_or(ecfg.seed),
    )?;
    println!(
        "correctness advised {:.4} ± {:.4}, unadvised {:.4} ± {:.4}, difference {:+.4} ({} seeds)",
        rep.advised_correctness,
        rep.advised_ci_halfwidth,
        rep.unadvised_correctness,
        rep.unadvised_ci_halfwidth,
        rep.correctness_difference,
        if rep.matched_seeds { "matched" } else { "independent" }
    );
    println!("reward advised {:.4}, unadvised {:.4}", rep.advised_reward, rep.unadvised_reward);
    write_json(&report.map(Path::to_path_buf).unwrap_or_else(|| cfg.output_dir.join("robustness_report.json")), &rep)?;
    Ok(rep)
}

/// Strong versus weak initialization at the configured budget, plus a weak
/// run with `weak_multiplier` times the epochs.
pub fn cmd_ablation(
    cfg: &RunConfig,
    threshold: f64,
    weak_multiplier: usize,
    report: Option<&Path>,
) -> Result<AblationReport, CommandError> {
    let with_mode = |mode| {
        let mut c = cfg.clone();
        c.policy.init_mode = mode;
        c
    };
    let (strong_cfg, weak_cfg) = (with_mode(InitMode::Strong), with_mode(InitMode::Weak));
    let env = cfg.build_environment()?;
    let ids = env.user_ids();
    let strong_policy = strong_cfg.policy_config_for(ids.iter().map(String::as_str));
    let weak_policy = weak_cfg.policy_config_for(ids.iter().map(String::as_str));
    let student: Box<dyn Student> = build_student(&cfg.student)?;
    let setup = |policy, loop_cfg| TrainSetup {
        policy,
        grpo: &cfg.grpo,
        loop_cfg,
        mode: cfg.mode,
        env: &env,
        student: student.as_ref(),
    };
    let mut rep = init_ablation(&setup(&strong_policy, &cfg.train), &setup(&weak_policy, &cfg.train), threshold)?;
    if weak_multiplier > 1 {
        let mut long = cfg.train.clone();
        long.epochs *= weak_multiplier;
        let (arm, _) = ablation_arm(&setup(&weak_policy, &long), threshold)?;
        rep.arms.insert(format!("weak_x{weak_multiplier}"), arm);
    }
    println!("{:<12} {:>10} {:>8}", "arm", "to_thresh", "final");
    for (name, arm) in &rep.arms {
        let reached = arm.updates_to_threshold.map_or("never".to_string(), |u| u.to_string());
        println!("{name:<12} {reached:>10} {:>8.4}", arm.final_reward);
    }
    write_json(&report.map(Path::to_path_buf).unwrap_or_else(|| cfg.output_dir.join("ablation_report.json")), &rep)?;
    Ok(rep)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChrfReport {
    pub per_line: Vec<f64>,
    pub mean: f64,
}

pub fn cmd_chrf(hyp: &Path, reference: &Path, config: &ChrfConfig) -> Result<ChrfReport, CommandError> {
    config.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
    let h = fs::read_to_string(hyp).map_err(io_err(hyp))?;
    let r = fs::read_to_string(reference).map_err(io_err(reference))?;
    let (hl, rl): (Vec<&str>, Vec<&str>) = (h.lines().collect(), r.lines().collect());
    if hl.len() != rl.len() {
        return Err(CommandError::LineCountMismatch {
            hyp: hyp.display().to_string(),
            hyp_lines: hl.len(),
            reference: reference.display().to_string(),
            ref_lines: rl.len(),
        });
    }
    let per_line = hl
        .iter()
        .zip(&rl)
        .map(|(a, b)| chrf(a, b, config).map_err(|e| ConfigError::Invalid(e.to_string())))
        .collect::<Result<Vec<f64>, _>>()?;
    let mean = if per_line.is_empty() {
        0.0
    } else {
        per_line.iter().sum::<f64>() / per_line.len() as f64
    };
    for (i, s) in per_line.iter().enumerate() {
        println!("{}\t{s:.4}", i + 1);
    }
    println!("mean\t{mean:.4}");
    Ok(ChrfReport { per_line, mean })
}

pub fn cmd_export_dataset(cfg: &RunConfig, dir: &Path) -> Result<(), CommandError> {
    let env = cfg.build_environment()?;
    export_dataset(&env, dir).map_err(|e| ConfigError::Invalid(e.to_string()))?;
    println!(
        "wrote {} train and {} eval tasks to {}",
        env.train().len(),
        env.eval().len(),
        dir.display()
    );
    Ok(())
}
