//! Rollouts, the training loop and greedy evaluation.
//!
//! All randomness hangs off labelled child streams of the run seed
//! (`train/update-{u}/group-{g}/record-{i}/...` during training and
//! `eval/{task_id}/...` during evaluation), so rollouts can run on any
//! number of threads and still produce identical results.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::environments::Environment;
use crate::grpo::{self, AdamState, GroupRollout, GrpoConfig, GrpoError, UpdateStats};
use crate::policy::{
    forward, greedy_action, init_params, sample_action, AdviceAction, ContextFeatures, PolicyConfig,
    PolicyError, PolicyParams,
};
use crate::rng::RngStream;
use crate::students::{summarize_attempt, Student, StudentError, StudentResponse};
use crate::types::{Reward, RolloutRecord, TaskInstance};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OrchestratorError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Grpo(#[from] GrpoError),
    #[error(transparent)]
    Student(#[from] StudentError),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("observer failed: {0}")]
    Observer(String),
    #[error("no usable group in update {0}")]
    EmptyUpdate(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineMode {
    /// Advice, then the student's answer.
    TwoStep,
    /// The student's unadvised attempt, advice conditioned on it, then a
    /// revision.
    ThreeStep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainLoopConfig {
    pub epochs: usize,
    pub tasks_per_batch: usize,
    pub mc_samples: usize,
    /// Greedy evaluation cadence in updates; the final update is always
    /// evaluated.
    pub eval_every: usize,
    pub checkpoint_every: usize,
    /// Student samples per task at evaluation.
    pub eval_mc: usize,
    pub seed: u64,
    /// Rollout threads; results do not depend on this.
    pub workers: usize,
}

impl Default for TrainLoopConfig {
    fn default() -> Self {
        TrainLoopConfig {
            epochs: 10,
            tasks_per_batch: 16,
            mc_samples: 1,
            eval_every: 10,
            checkpoint_every: 50,
            eval_mc: 4,
            seed: 0,
            workers: 1,
        }
    }
}

impl TrainLoopConfig {
    pub fn validate(&self) -> Result<(), OrchestratorError> {
        let fields = [
            ("epochs", self.epochs),
            ("tasks_per_batch", self.tasks_per_batch),
            ("mc_samples", self.mc_samples),
            ("eval_every", self.eval_every),
            ("checkpoint_every", self.checkpoint_every),
            ("eval_mc", self.eval_mc),
            ("workers", self.workers),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(OrchestratorError::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }

    pub fn batches_per_epoch(&self, train_tasks: usize) -> usize {
        train_tasks.div_ceil(self.tasks_per_batch)
    }

    pub fn total_updates(&self, train_tasks: usize) -> u64 {
        (self.epochs * self.batches_per_epoch(train_tasks)) as u64
    }
}

/// Everything a rollout reads.
#[derive(Clone, Copy)]
pub struct RolloutContext<'a> {
    pub policy: &'a PolicyConfig,
    pub params: &'a PolicyParams,
    pub env: &'a Environment,
    pub student: &'a dyn Student,
    pub mode: PipelineMode,
    pub mc_samples: usize,
}

fn respond_or_log(
    student: &dyn Student,
    task: &TaskInstance,
    advice: Option<&str>,
    attempt: Option<&StudentResponse>,
    rng: &RngStream,
) -> Option<StudentResponse> {
    match student.respond(task, advice, attempt, rng) {
        Ok(r) => Some(r),
        Err(e) => {
            log::warn!("student call for {} failed, scoring 0: {e}", task.task_id);
            None
        }
    }
}

/// Monte Carlo mean of `samples` scored responses. Failed student calls
/// score 0.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledReward {
    pub reward: Reward,
    pub correct: Vec<bool>,
    pub score_calls: u64,
}

pub fn mc_reward(
    env: &Environment,
    student: &dyn Student,
    task: &TaskInstance,
    advice: Option<&str>,
    attempt: Option<&StudentResponse>,
    samples: usize,
    rng: &RngStream,
) -> SampledReward {
    let mut total = 0.0;
    let mut components: BTreeMap<String, f64> = BTreeMap::new();
    let mut correct = Vec::new();
    let mut score_calls = 0;
    for k in 0..samples {
        let reward = match respond_or_log(student, task, advice, attempt, &rng.derive(&format!("mc-{k}"))) {
            Some(resp) => {
                correct.extend(resp.measured.is_correct);
                score_calls += 1;
                env.score(task, &resp)
            }
            None => Reward::malformed(),
        };
        total += reward.value;
        for (name, v) in reward.components.into_iter().flatten() {
            *components.entry(name).or_insert(0.0) += v;
        }
    }
    let n = samples as f64;
    let value = total / n;
    let reward = if components.is_empty() {
        Reward::scalar(value)
    } else {
        Reward::with_components(value, components.into_iter().map(|(k, v)| (k, v / n)).collect())
    };
    SampledReward {
        reward,
        correct,
        score_calls,
    }
}

fn unadvised_attempt(ctx: &RolloutContext<'_>, task: &TaskInstance, rng: &RngStream) -> Result<StudentResponse, OrchestratorError> {
    Ok(ctx.student.respond(task, None, None, &rng.derive("attempt"))?)
}

/// Sample one piece of advice for `task` and score it. In three-step mode
/// the student's first attempt is taken from `attempt`, or drawn from `rng`
/// when not given.
pub fn rollout_one(
    ctx: &RolloutContext<'_>,
    task: &TaskInstance,
    attempt: Option<&StudentResponse>,
    rng: &RngStream,
) -> Result<RolloutRecord, OrchestratorError> {
    let owned;
    let attempt = match (ctx.mode, attempt) {
        (PipelineMode::TwoStep, _) => None,
        (PipelineMode::ThreeStep, Some(a)) => Some(a),
        (PipelineMode::ThreeStep, None) => {
            owned = unadvised_attempt(ctx, task, rng)?;
            Some(&owned)
        }
    };
    let summary = attempt.map(summarize_attempt);
    let features = ctx.policy.featurize(task, summary.as_ref())?;
    let dist = forward(ctx.policy, ctx.params, &features)?;
    let (action, old_log_prob) = sample_action(ctx.policy, &dist, &mut rng.derive("advice"))?;
    let sampled = mc_reward(
        ctx.env,
        ctx.student,
        task,
        Some(&action.rendered_text),
        attempt,
        ctx.mc_samples,
        rng,
    );
    Ok(RolloutRecord {
        task_id: task.task_id.clone(),
        features,
        action,
        old_log_prob,
        reward: sampled.reward,
        mc_samples: ctx.mc_samples,
    })
}

/// `group_size` rollouts of one task. In three-step mode the whole group
/// revises a single shared attempt so that every record has the same
/// features.
pub fn collect_group(
    ctx: &RolloutContext<'_>,
    task: &TaskInstance,
    group_size: usize,
    rng: &RngStream,
) -> Result<GroupRollout, OrchestratorError> {
    if group_size < 2 {
        return Err(GrpoError::GroupTooSmall(group_size).into());
    }
    let attempt = match ctx.mode {
        PipelineMode::TwoStep => None,
        PipelineMode::ThreeStep => Some(unadvised_attempt(ctx, task, rng)?),
    };
    let records = (0..group_size)
        .map(|i| rollout_one(ctx, task, attempt.as_ref(), &rng.derive(&format!("record-{i}"))))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(GroupRollout {
        task_id: task.task_id.clone(),
        records,
    })
}

/// Where evaluation advice comes from.
#[derive(Clone, Copy)]
pub enum AdviceSource<'a> {
    /// Argmax per head, ties broken at random.
    Greedy(&'a PolicyConfig, &'a PolicyParams),
    /// A sample from the policy.
    Sampled(&'a PolicyConfig, &'a PolicyParams),
    /// The same text (or none) for every task.
    Fixed(Option<&'a str>),
    /// One structured action for every task, rendered over the heads active
    /// for that task.
    Static(&'a PolicyConfig, &'a AdviceAction),
}

/// Text of `action` restricted to the heads active for `features`; `None`
/// when no chosen head is active.
pub fn render_static(
    policy: &PolicyConfig,
    action: &AdviceAction,
    features: &ContextFeatures,
) -> Result<Option<String>, PolicyError> {
    let picks: Vec<(usize, usize)> = policy
        .active_heads(features)
        .into_iter()
        .enumerate()
        .filter(|&(_, on)| on)
        .filter_map(|(h, _)| action.choices.get(&policy.heads[h].name).map(|&i| (h, i)))
        .collect();
    if picks.is_empty() {
        return Ok(None);
    }
    Ok(Some(AdviceAction::from_choices(policy, &picks)?.rendered_text))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub mode: PipelineMode,
    pub mc_samples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub n_tasks: usize,
    pub mean_reward: f64,
    /// Normal-approximation 95% halfwidth over per-task rewards.
    pub ci_halfwidth: f64,
    pub per_user: BTreeMap<String, f64>,
    pub components: BTreeMap<String, f64>,
    /// Fraction of correct answers, for students that report correctness.
    pub correctness_rate: Option<f64>,
    pub correctness_ci_halfwidth: Option<f64>,
    pub score_calls: u64,
}

/// Advice text and the outcome for one evaluation task.
pub fn evaluate_task(
    source: AdviceSource<'_>,
    env: &Environment,
    student: &dyn Student,
    task: &TaskInstance,
    cfg: &EvalConfig,
) -> Result<SampledReward, OrchestratorError> {
    let trng = RngStream::derive_stream(cfg.seed, "eval").derive(&task.task_id);
    let attempt = match cfg.mode {
        PipelineMode::TwoStep => None,
        PipelineMode::ThreeStep => respond_or_log(student, task, None, None, &trng.derive("attempt")),
    };
    let advice: Option<String> = match source {
        AdviceSource::Fixed(text) => text.map(str::to_string),
        AdviceSource::Greedy(policy, params) | AdviceSource::Sampled(policy, params) => {
            let summary = attempt.as_ref().map(summarize_attempt);
            let features = policy.featurize(task, summary.as_ref())?;
            let dist = forward(policy, params, &features)?;
            let mut arng = trng.derive("advice");
            let action = match source {
                AdviceSource::Greedy(..) => greedy_action(policy, &dist, &mut arng)?,
                _ => sample_action(policy, &dist, &mut arng)?.0,
            };
            Some(action.rendered_text)
        }
        AdviceSource::Static(policy, action) => {
            let summary = attempt.as_ref().map(summarize_attempt);
            render_static(policy, action, &policy.featurize(task, summary.as_ref())?)?
        }
    };
    Ok(mc_reward(env, student, task, advice.as_deref(), attempt.as_ref(), cfg.mc_samples, &trng))
}

fn mean_and_halfwidth(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * (var / n).sqrt())
}

/// Evaluate on `tasks`. Every task uses the stream `eval/{task_id}` of
/// `cfg.seed`, so two evaluations with the same seed see the same student
/// randomness (matched seeds).
pub fn evaluate(
    source: AdviceSource<'_>,
    env: &Environment,
    student: &dyn Student,
    tasks: &[TaskInstance],
    cfg: &EvalConfig,
) -> Result<EvalRecord, OrchestratorError> {
    let outcomes = tasks
        .iter()
        .map(|t| evaluate_task(source, env, student, t, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(summarize_eval(tasks, &outcomes))
}

pub fn summarize_eval(tasks: &[TaskInstance], outcomes: &[SampledReward]) -> EvalRecord {
    let rewards: Vec<f64> = outcomes.iter().map(|o| o.reward.value).collect();
    let (mean_reward, ci_halfwidth) = mean_and_halfwidth(&rewards);
    let mut per_user: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let mut components: BTreeMap<String, f64> = BTreeMap::new();
    for (t, o) in tasks.iter().zip(outcomes) {
        let e = per_user.entry(t.user_id.clone()).or_insert((0.0, 0));
        e.0 += o.reward.value;
        e.1 += 1;
        for (k, v) in o.reward.components.iter().flatten() {
            *components.entry(k.clone()).or_insert(0.0) += v;
        }
    }
    let n = tasks.len().max(1) as f64;
    let correct: Vec<f64> = outcomes
        .iter()
        .flat_map(|o| o.correct.iter().map(|&c| if c { 1.0 } else { 0.0 }))
        .collect();
    let (correctness_rate, correctness_ci_halfwidth) = if correct.is_empty() {
        (None, None)
    } else {
        let (m, _) = mean_and_halfwidth(&correct);
        let hw = 1.96 * (m * (1.0 - m) / correct.len() as f64).sqrt();
        (Some(m), Some(hw))
    };
    EvalRecord {
        n_tasks: tasks.len(),
        mean_reward,
        ci_halfwidth,
        per_user: per_user.into_iter().map(|(k, (s, c))| (k, s / c as f64)).collect(),
        components: components.into_iter().map(|(k, v)| (k, v / n)).collect(),
        correctness_rate,
        correctness_ci_halfwidth,
        score_calls: outcomes.iter().map(|o| o.score_calls).sum(),
    }
}

/// Mutable training state; everything a checkpoint needs to resume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub params: PolicyParams,
    pub ref_params: PolicyParams,
    pub adam: AdamState,
    /// Completed updates.
    pub update: u64,
    /// Root training stream; its position equals `update`.
    pub rng: RngStream,
}

impl TrainState {
    pub fn fresh(policy: &PolicyConfig, seed: u64) -> Self {
        let params = init_params(policy, &mut RngStream::derive_stream(seed, "init"));
        TrainState {
            ref_params: params.clone(),
            adam: AdamState::new(&params),
            params,
            update: 0,
            rng: RngStream::derive_stream(seed, "train"),
        }
    }
}

/// One row of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsLine {
    pub update: u64,
    pub mean_reward: f64,
    pub kl: f64,
    pub clip_fraction: f64,
    pub entropy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_reward: Option<f64>,
}

pub enum TrainEvent<'a> {
    Update {
        metrics: &'a MetricsLine,
        stats: &'a UpdateStats,
        eval: Option<&'a EvalRecord>,
    },
    Checkpoint {
        state: &'a TrainState,
        last: bool,
    },
}

pub struct TrainSetup<'a> {
    pub policy: &'a PolicyConfig,
    pub grpo: &'a GrpoConfig,
    pub loop_cfg: &'a TrainLoopConfig,
    pub mode: PipelineMode,
    pub env: &'a Environment,
    pub student: &'a dyn Student,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub metrics: Vec<MetricsLine>,
    pub final_eval: Option<EvalRecord>,
    /// Set when training stopped on a non-finite loss.
    pub aborted: Option<GrpoError>,
}

fn notify(
    observer: &mut dyn FnMut(TrainEvent<'_>) -> Result<(), String>,
    event: TrainEvent<'_>,
) -> Result<(), OrchestratorError> {
    observer(event).map_err(OrchestratorError::Observer)
}

fn collect_batch(
    setup: &TrainSetup<'_>,
    ctx: &RolloutContext<'_>,
    tasks: &[TaskInstance],
    urng: &RngStream,
    pool: Option<&rayon::ThreadPool>,
) -> Vec<Result<GroupRollout, OrchestratorError>> {
    let one = |(j, t): (usize, &TaskInstance)| collect_group(ctx, t, setup.grpo.group_size, &urng.derive(&format!("group-{j}")));
    match pool {
        Some(p) => p.install(|| tasks.par_iter().enumerate().map(one).collect()),
        None => tasks.iter().enumerate().map(one).collect(),
    }
}

/// Run GRPO training from `start` (a fresh or resumed state). `observer`
/// sees every metrics line and checkpoint as they happen. A non-finite loss
/// stops training: the last good state is checkpointed and returned with
/// `aborted` set.
pub fn train(
    setup: &TrainSetup<'_>,
    start: TrainState,
    observer: &mut dyn FnMut(TrainEvent<'_>) -> Result<(), String>,
) -> Result<TrainOutcome, OrchestratorError> {
    let lc = setup.loop_cfg;
    lc.validate()?;
    setup.grpo.validate()?;
    setup.policy.validate()?;
    let train_tasks = setup.env.train();
    if train_tasks.is_empty() {
        return Err(OrchestratorError::InvalidConfig("no training tasks".into()));
    }
    let pool = if lc.workers > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(lc.workers)
                .build()
                .map_err(|e| OrchestratorError::InvalidConfig(e.to_string()))?,
        )
    } else {
        None
    };
    let bpe = lc.batches_per_epoch(train_tasks.len());
    let total = lc.total_updates(train_tasks.len());
    let eval_cfg = EvalConfig {
        mode: setup.mode,
        mc_samples: lc.eval_mc,
        seed: lc.seed,
    };
    let root = RngStream::derive_stream(lc.seed, "train");
    let mut state = start;
    let mut metrics = Vec::new();
    let mut final_eval = None;
    let mut order: Vec<usize> = Vec::new();
    let mut order_epoch = usize::MAX;

    while state.update < total {
        let u = state.update as usize;
        let (epoch, batch) = (u / bpe, u % bpe);
        if epoch != order_epoch {
            order = (0..train_tasks.len()).collect();
            root.derive(&format!("shuffle-{epoch}")).shuffle(&mut order);
            order_epoch = epoch;
        }
        let end = ((batch + 1) * lc.tasks_per_batch).min(order.len());
        let tasks: Vec<TaskInstance> = order[batch * lc.tasks_per_batch..end]
            .iter()
            .map(|&i| train_tasks[i].clone())
            .collect();
        let urng = root.derive(&format!("update-{u}"));
        let ctx = RolloutContext {
            policy: setup.policy,
            params: &state.params,
            env: setup.env,
            student: setup.student,
            mode: setup.mode,
            mc_samples: lc.mc_samples,
        };
        let mut groups = Vec::with_capacity(tasks.len());
        for g in collect_batch(setup, &ctx, &tasks, &urng, pool.as_ref()) {
            match g {
                Ok(g) => groups.push(g),
                Err(OrchestratorError::Student(e)) => log::warn!("dropping group in update {u}: {e}"),
                Err(e) => return Err(e),
            }
        }
        if groups.is_empty() {
            return Err(OrchestratorError::EmptyUpdate(state.update));
        }

        let mut next = state.clone();
        let stats = match grpo::update(
            setup.policy,
            &mut next.params,
            &state.ref_params,
            &groups,
            setup.grpo,
            &mut next.adam,
        ) {
            Ok(s) => s,
            Err(GrpoError::NonFiniteLoss(msg)) => {
                log::error!("non-finite loss at update {}: {msg}", state.update + 1);
                notify(observer, TrainEvent::Checkpoint { state: &state, last: true })?;
                return Ok(TrainOutcome {
                    state,
                    metrics,
                    final_eval,
                    aborted: Some(GrpoError::NonFiniteLoss(msg)),
                });
            }
            Err(e) => return Err(e.into()),
        };
        next.update += 1;
        next.rng = root.at_position(next.update);
        if setup.grpo.ref_refresh_every.is_some_and(|k| next.update % k as u64 == 0) {
            next.ref_params = next.params.clone();
        }
        state = next;

        let last = state.update == total;
        let eval = if state.update % lc.eval_every as u64 == 0 || last {
            let e = evaluate(
                AdviceSource::Greedy(setup.policy, &state.params),
                setup.env,
                setup.student,
                setup.env.eval(),
                &eval_cfg,
            )?;
            Some(e)
        } else {
            None
        };
        let line = MetricsLine {
            update: state.update,
            mean_reward: stats.mean_reward,
            kl: stats.kl_to_reference,
            clip_fraction: stats.clip_fraction,
            entropy: stats.mean_entropy(),
            eval_reward: eval.as_ref().map(|e| e.mean_reward),
        };
        log::info!(
            "update {}/{total} reward {:.4} kl {:.5}{}",
            state.update,
            line.mean_reward,
            line.kl,
            line.eval_reward.map(|r| format!(" eval {r:.4}")).unwrap_or_default()
        );
        notify(observer, TrainEvent::Update { metrics: &line, stats: &stats, eval: eval.as_ref() })?;
        metrics.push(line);
        if eval.is_some() {
            final_eval = eval;
        }
        if state.update % lc.checkpoint_every as u64 == 0 || last {
            notify(observer, TrainEvent::Checkpoint { state: &state, last })?;
        }
    }
    Ok(TrainOutcome {
        state,
        metrics,
        final_eval,
        aborted: None,
    })
}

#[cfg(test)]
mod tests;
