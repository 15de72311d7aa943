//! Comparative experiments: the best static advice found under a score
//! budget, the unadvised student, cross-student transfer, out-of-domain
//! robustness and the strong/weak initialization ablation.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::environments::Environment;
use crate::orchestrator::{
    evaluate, evaluate_task, train, AdviceSource, EvalConfig, EvalRecord, OrchestratorError,
    TrainEvent, TrainSetup, TrainState,
};
use crate::policy::{AdviceAction, PolicyConfig, PolicyError, PolicyParams};
use crate::rng::RngStream;
use crate::students::{build_student, Student, StudentError, StudentSpec};
use crate::types::TaskInstance;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HarnessError {
    #[error("budget of {budget} score calls is below the {needed} needed for one neighbourhood")]
    BudgetTooSmall { budget: u64, needed: u64 },
    #[error("no head is active for any task; nothing to search")]
    NoSearchableHeads,
    #[error("mismatched experiment arms: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Orchestrator(#[from] OrchestratorError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Student(#[from] StudentError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineResult {
    pub best_fixed_action: AdviceAction,
    pub train_mean_reward: f64,
    pub eval_mean_reward: f64,
    pub eval_ci_halfwidth: f64,
    pub reward_calls_used: u64,
    pub candidates_evaluated: usize,
}

/// Heads the static search varies: those active for at least one task.
fn searchable_heads(policy: &PolicyConfig, tasks: &[TaskInstance]) -> Result<Vec<usize>, HarnessError> {
    let mut on = vec![false; policy.heads.len()];
    for t in tasks {
        let f = policy.featurize(t, None)?;
        for (h, a) in policy.active_heads(&f).into_iter().enumerate() {
            on[h] |= a;
        }
    }
    let heads: Vec<usize> = (0..on.len()).filter(|&h| on[h]).collect();
    if heads.is_empty() {
        return Err(HarnessError::NoSearchableHeads);
    }
    Ok(heads)
}

struct Search<'a> {
    policy: &'a PolicyConfig,
    heads: &'a [usize],
    env: &'a Environment,
    student: &'a dyn Student,
    tasks: &'a [TaskInstance],
    cfg: EvalConfig,
    budget: u64,
    used: u64,
    cache: HashMap<Vec<usize>, f64>,
}

impl Search<'_> {
    fn action(&self, choice: &[usize]) -> Result<AdviceAction, PolicyError> {
        let picks: Vec<(usize, usize)> = self.heads.iter().copied().zip(choice.iter().copied()).collect();
        AdviceAction::from_choices(self.policy, &picks)
    }

    /// Mean training reward of `choice`, or `None` once the budget runs out.
    /// A candidate cut short by the budget still spends it.
    fn score(&mut self, choice: &[usize]) -> Result<Option<f64>, HarnessError> {
        if let Some(&r) = self.cache.get(choice) {
            return Ok(Some(r));
        }
        let action = self.action(choice)?;
        let mut total = 0.0;
        for t in self.tasks {
            if self.used >= self.budget {
                return Ok(None);
            }
            let out = evaluate_task(AdviceSource::Static(self.policy, &action), self.env, self.student, t, &self.cfg)?;
            self.used += out.score_calls;
            total += out.reward.value;
        }
        let r = total / self.tasks.len() as f64;
        self.cache.insert(choice.to_vec(), r);
        Ok(Some(r))
    }
}

/// Best single advice action applied to every task, found by steepest-ascent
/// hill climbing with random restarts. Each candidate is scored once per
/// training task (one student sample, shared random streams across
/// candidates). Search stops when `budget` score calls are spent, the action
/// space is exhausted, or restarts stop finding anything new.
pub fn static_baseline(
    policy: &PolicyConfig,
    env: &Environment,
    student: &dyn Student,
    train_set: &[TaskInstance],
    eval_set: &[TaskInstance],
    budget: u64,
    eval_cfg: &EvalConfig,
) -> Result<BaselineResult, HarnessError> {
    let heads = searchable_heads(policy, train_set)?;
    let arities: Vec<usize> = heads.iter().map(|&h| policy.heads[h].arity).collect();
    let needed: u64 = arities.iter().map(|&a| a as u64 - 1).sum();
    if budget < needed {
        return Err(HarnessError::BudgetTooSmall { budget, needed });
    }
    let space: f64 = arities.iter().map(|&a| a as f64).product();
    let mut search = Search {
        policy,
        heads: &heads,
        env,
        student,
        tasks: train_set,
        cfg: EvalConfig {
            mode: eval_cfg.mode,
            mc_samples: 1,
            seed: eval_cfg.seed,
        },
        budget,
        used: 0,
        cache: HashMap::new(),
    };
    let mut rng = RngStream::derive_stream(eval_cfg.seed, "static-baseline");
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut stale_restarts = 0;

    'restarts: while (search.cache.len() as f64) < space && stale_restarts < 50 {
        let before = search.cache.len();
        let mut current: Vec<usize> = arities.iter().map(|&a| rng.below(a)).collect();
        let Some(mut current_r) = search.score(&current)? else { break };
        loop {
            if best.as_ref().is_none_or(|(_, r)| current_r > *r) {
                best = Some((current.clone(), current_r));
            }
            let mut step: Option<(Vec<usize>, f64)> = None;
            for (slot, &arity) in arities.iter().enumerate() {
                for v in 0..arity {
                    if v == current[slot] {
                        continue;
                    }
                    let mut n = current.clone();
                    n[slot] = v;
                    let Some(r) = search.score(&n)? else { break 'restarts };
                    if r > current_r && step.as_ref().is_none_or(|(_, s)| r > *s) {
                        step = Some((n, r));
                    }
                }
            }
            match step {
                Some((n, r)) => (current, current_r) = (n, r),
                None => break,
            }
        }
        stale_restarts = if search.cache.len() == before { stale_restarts + 1 } else { 0 };
    }

    let (choice, train_mean_reward) = best.ok_or(HarnessError::BudgetTooSmall {
        budget,
        needed: train_set.len() as u64,
    })?;
    let action = search.action(&choice)?;
    let eval = evaluate(AdviceSource::Static(policy, &action), env, student, eval_set, eval_cfg)?;
    Ok(BaselineResult {
        best_fixed_action: action,
        train_mean_reward,
        eval_mean_reward: eval.mean_reward,
        eval_ci_halfwidth: eval.ci_halfwidth,
        reward_calls_used: search.used,
        candidates_evaluated: search.cache.len(),
    })
}

/// The student answering with no advice at all.
pub fn no_advisor_baseline(
    env: &Environment,
    student: &dyn Student,
    eval_set: &[TaskInstance],
    cfg: &EvalConfig,
) -> Result<EvalRecord, HarnessError> {
    Ok(evaluate(AdviceSource::Fixed(None), env, student, eval_set, cfg)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferRow {
    pub student_id: String,
    pub eval_mean_reward: f64,
    pub ci_halfwidth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub rows: Vec<TransferRow>,
}

/// Greedy evaluation of one checkpoint against each student, on the same
/// tasks with the same seed.
pub fn transfer_eval(
    policy: &PolicyConfig,
    params: &PolicyParams,
    env: &Environment,
    students: &[StudentSpec],
    eval_set: &[TaskInstance],
    cfg: &EvalConfig,
) -> Result<TransferReport, HarnessError> {
    let mut rows = Vec::with_capacity(students.len());
    for spec in students {
        let student = build_student(spec)?;
        let rec = evaluate(AdviceSource::Greedy(policy, params), env, student.as_ref(), eval_set, cfg)?;
        rows.push(TransferRow {
            student_id: spec.student_id.clone(),
            eval_mean_reward: rec.mean_reward,
            ci_halfwidth: rec.ci_halfwidth,
        });
    }
    Ok(TransferReport { rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    /// Whether both arms used the same evaluation seed.
    pub matched_seeds: bool,
    pub advised_correctness: f64,
    pub advised_ci_halfwidth: f64,
    pub unadvised_correctness: f64,
    pub unadvised_ci_halfwidth: f64,
    /// Advised minus unadvised correctness.
    pub correctness_difference: f64,
    pub advised_reward: f64,
    pub unadvised_reward: f64,
}

/// Correctness with and without an out-of-domain advisor. The unadvised arm
/// uses `unadvised_seed`; pass `cfg.seed` for matched streams.
pub fn robustness_eval(
    policy: &PolicyConfig,
    params: &PolicyParams,
    env: &Environment,
    student: &dyn Student,
    eval_set: &[TaskInstance],
    cfg: &EvalConfig,
    unadvised_seed: u64,
) -> Result<RobustnessReport, HarnessError> {
    let advised = evaluate(AdviceSource::Greedy(policy, params), env, student, eval_set, cfg)?;
    let ucfg = EvalConfig {
        seed: unadvised_seed,
        ..*cfg
    };
    let unadvised = evaluate(AdviceSource::Fixed(None), env, student, eval_set, &ucfg)?;
    let missing = || HarnessError::Mismatch("student reports no correctness for this environment".into());
    let a = advised.correctness_rate.ok_or_else(missing)?;
    let u = unadvised.correctness_rate.ok_or_else(missing)?;
    Ok(RobustnessReport {
        matched_seeds: unadvised_seed == cfg.seed,
        advised_correctness: a,
        advised_ci_halfwidth: advised.correctness_ci_halfwidth.unwrap_or(0.0),
        unadvised_correctness: u,
        unadvised_ci_halfwidth: unadvised.correctness_ci_halfwidth.unwrap_or(0.0),
        correctness_difference: a - u,
        advised_reward: advised.mean_reward,
        unadvised_reward: unadvised.mean_reward,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationArm {
    /// First update whose greedy evaluation reached the threshold.
    pub updates_to_threshold: Option<u64>,
    pub final_reward: f64,
    pub eval_curve: Vec<(u64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub threshold: f64,
    pub arms: BTreeMap<String, AblationArm>,
}

/// Train from scratch and record the greedy evaluation curve.
pub fn ablation_arm(setup: &TrainSetup<'_>, threshold: f64) -> Result<(AblationArm, TrainState), HarnessError> {
    let mut curve = Vec::new();
    let start = TrainState::fresh(setup.policy, setup.loop_cfg.seed);
    let out = train(setup, start, &mut |ev| {
        if let TrainEvent::Update { metrics, .. } = ev {
            if let Some(r) = metrics.eval_reward {
                curve.push((metrics.update, r));
            }
        }
        Ok(())
    })?;
    if let Some(e) = out.aborted {
        return Err(OrchestratorError::Grpo(e).into());
    }
    let arm = AblationArm {
        updates_to_threshold: curve.iter().find(|(_, r)| *r >= threshold).map(|(u, _)| *u),
        final_reward: out.final_eval.map_or(0.0, |e| e.mean_reward),
        eval_curve: curve,
    };
    Ok((arm, out.state))
}

/// Run both arms. They must share the environment, student, seeds and
/// every training setting except the advisor's initialization mode.
pub fn init_ablation(
    strong: &TrainSetup<'_>,
    weak: &TrainSetup<'_>,
    threshold: f64,
) -> Result<AblationReport, HarnessError> {
    if strong.env.spec() != weak.env.spec() || strong.student.spec() != weak.student.spec() {
        return Err(HarnessError::Mismatch("arms use different environments or students".into()));
    }
    if strong.loop_cfg.seed != weak.loop_cfg.seed || strong.mode != weak.mode {
        return Err(HarnessError::Mismatch("arms use different seeds or pipelines".into()));
    }
    if strong.grpo != weak.grpo {
        return Err(HarnessError::Mismatch("arms use different optimizer settings".into()));
    }
    let mut arms = BTreeMap::new();
    arms.insert("strong".to_string(), ablation_arm(strong, threshold)?.0);
    arms.insert("weak".to_string(), ablation_arm(weak, threshold)?.0);
    Ok(AblationReport { threshold, arms })
}

#[cfg(test)]
mod tests;
