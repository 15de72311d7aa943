use std::sync::atomic::{AtomicU64, Ordering};

use super::*;
use crate::environments::{
    default_glossary, mean_length_reward, EnvironmentSpec, SHIPPED_LENGTH_LATENTS, USER_NAMES,
};
use crate::grpo::GrpoConfig;
use crate::orchestrator::{PipelineMode, TrainLoopConfig};
use crate::policy::{AdviceTemplates, InitMode, DEFAULT_LENGTH_BUCKETS};
use crate::students::{SimulatedStudent, StudentResponse};
use crate::types::{DomainTag, HiddenLatent, LatentPayload, UserIndex};

fn policy(mode: InitMode) -> PolicyConfig {
    let heads = AdviceTemplates::default().build_heads(&default_glossary());
    PolicyConfig::new(UserIndex::new(USER_NAMES), heads, mode)
}

fn env(domain: DomainTag, train: usize, eval: usize) -> Environment {
    Environment::build(EnvironmentSpec::shipped(domain, train, eval, 17)).unwrap()
}

fn student(compliance: f64, sigma: f64) -> SimulatedStudent {
    SimulatedStudent::new(StudentSpec::simulated("s", compliance, sigma))
}

fn cfg(seed: u64) -> EvalConfig {
    EvalConfig {
        mode: PipelineMode::TwoStep,
        mc_samples: 1,
        seed,
    }
}

/// Counts every response handed to the judge.
struct Counting<'a> {
    inner: &'a dyn Student,
    calls: AtomicU64,
}

impl Student for Counting<'_> {
    fn spec(&self) -> &StudentSpec {
        self.inner.spec()
    }

    fn respond(
        &self,
        task: &TaskInstance,
        advice: Option<&str>,
        attempt: Option<&StudentResponse>,
        rng: &RngStream,
    ) -> Result<StudentResponse, StudentError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.respond(task, advice, attempt, rng)
    }
}

/// An advisor whose greedy length choice is each user's preferred length.
fn perfect_length_params(pol: &PolicyConfig, env: &Environment) -> PolicyParams {
    let mut p = PolicyParams::zeros(pol);
    let head = pol.head_index("length_bucket").unwrap();
    for u in &env.spec().users {
        let row = pol.users.get(&u.user_id).unwrap();
        let LatentPayload::ReviewLength { preferred_length } = u.latent else { unreachable!() };
        let bucket = DEFAULT_LENGTH_BUCKETS.iter().position(|&b| b == preferred_length).unwrap();
        p.user_embedding.row_mut(row)[row] = 1.0;
        p.hidden_weights.row_mut(row)[row] = 3.0;
        p.heads[head].weights.row_mut(bucket)[row] = 10.0;
    }
    p
}

fn brute_force_static_length(env: &Environment, st: &dyn Student, c: &EvalConfig) -> f64 {
    DEFAULT_LENGTH_BUCKETS
        .iter()
        .map(|b| {
            let text = format!("Write the review in about {b} words.");
            evaluate(AdviceSource::Fixed(Some(&text)), env, st, env.eval(), c).unwrap().mean_reward
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

#[test]
fn static_baseline_finds_the_best_fixed_length() {
    let pol = policy(InitMode::Strong);
    let env = env(DomainTag::ReviewLength, 200, 200);
    let st = student(1.0, 0.05);
    let counting = Counting {
        inner: &st,
        calls: AtomicU64::new(0),
    };
    let c = cfg(4);
    let res = static_baseline(&pol, &env, &counting, env.train(), env.eval(), 1_000_000, &c).unwrap();
    let oracle = brute_force_static_length(&env, &st, &c);
    assert!((res.eval_mean_reward - oracle).abs() <= 0.02, "{} vs {oracle}", res.eval_mean_reward);
    assert_eq!(res.best_fixed_action.choices["length_bucket"], 0);
    // every bucket was tried once and nothing else was scored
    assert_eq!(res.candidates_evaluated, 25);
    assert_eq!(res.reward_calls_used, 25 * 200);
    assert_eq!(counting.calls.load(Ordering::Relaxed), res.reward_calls_used + 200);
}

#[test]
fn static_baseline_respects_the_budget() {
    let pol = policy(InitMode::Strong);
    let env = env(DomainTag::ReviewLength, 64, 16);
    let st = student(1.0, 0.05);
    let counting = Counting {
        inner: &st,
        calls: AtomicU64::new(0),
    };
    let res = static_baseline(&pol, &env, &counting, env.train(), env.eval(), 150, &cfg(1)).unwrap();
    assert_eq!(res.reward_calls_used, 150);
    assert_eq!(res.candidates_evaluated, 2);
    assert_eq!(counting.calls.load(Ordering::Relaxed), 150 + 16);

    let err = static_baseline(&pol, &env, &st, env.train(), env.eval(), 10, &cfg(1)).unwrap_err();
    assert_eq!(err, HarnessError::BudgetTooSmall { budget: 10, needed: 24 });
}

#[test]
fn static_baseline_searches_two_axes() {
    let pol = policy(InitMode::Strong);
    let env = env(DomainTag::MathSolutions, 40, 40);
    let st = student(1.0, 0.0);
    let res = static_baseline(&pol, &env, &st, env.train(), env.eval(), 100_000, &cfg(2)).unwrap();
    assert_eq!(res.candidates_evaluated, 4);
    // profiles are uniform over the four flag pairs, so every fixed pair
    // scores (1 + 0.4 + 0.4 + 0) / 4
    assert!((res.eval_mean_reward - 0.45).abs() < 1e-12);
}

#[test]
fn static_matches_trained_advisor_without_heterogeneity() {
    let pol = policy(InitMode::Strong);
    let spec = EnvironmentSpec {
        domain_tag: DomainTag::ReviewLength,
        users: vec![HiddenLatent {
            user_id: "alice".into(),
            latent: LatentPayload::ReviewLength { preferred_length: 104 },
        }],
        train_tasks: 160,
        eval_tasks: 40,
        seed: 2,
        chrf: Default::default(),
    };
    let env = Environment::build(spec).unwrap();
    let st = student(1.0, 0.05);
    let grpo = GrpoConfig {
        learning_rate: 3e-3,
        kl_coeff: 0.1,
        ..GrpoConfig::default()
    };
    let lc = TrainLoopConfig {
        epochs: 30,
        seed: 3,
        ..TrainLoopConfig::default()
    };
    let setup = TrainSetup {
        policy: &pol,
        grpo: &grpo,
        loop_cfg: &lc,
        mode: PipelineMode::TwoStep,
        env: &env,
        student: &st,
    };
    let (arm, _) = ablation_arm(&setup, 0.9).unwrap();
    let budget = lc.total_updates(160) * 16 * 8;
    let eval_cfg = EvalConfig {
        mode: PipelineMode::TwoStep,
        mc_samples: lc.eval_mc,
        seed: lc.seed,
    };
    let res = static_baseline(&pol, &env, &st, env.train(), env.eval(), budget, &eval_cfg).unwrap();
    assert!(
        (res.eval_mean_reward - arm.final_reward).abs() <= 0.05,
        "static {} vs trained {}",
        res.eval_mean_reward,
        arm.final_reward
    );
}

#[test]
fn heterogeneity_gap_on_shipped_users() {
    let prefs = SHIPPED_LENGTH_LATENTS;
    let per_user = crate::environments::per_user_optimal_length_reward(&prefs, &DEFAULT_LENGTH_BUCKETS);
    let (_, fixed) = crate::environments::optimal_static_length(&prefs, &DEFAULT_LENGTH_BUCKETS);
    assert!(per_user > fixed);
}

#[test]
fn no_advisor_baselines() {
    let len = env(DomainTag::ReviewLength, 8, 80);
    let r = no_advisor_baseline(&len, &student(1.0, 0.0), len.eval(), &cfg(0)).unwrap();
    let expected = mean_length_reward(300, &SHIPPED_LENGTH_LATENTS);
    assert!((r.mean_reward - expected).abs() < 1e-12);

    let level = env(DomainTag::ReviewLevel, 5, 50);
    let r = no_advisor_baseline(&level, &student(1.0, 0.0), level.eval(), &cfg(0)).unwrap();
    assert!((r.mean_reward - 0.2).abs() < 1e-12);

    let math = env(DomainTag::MathSolutions, 4, 40);
    let r = no_advisor_baseline(&math, &student(1.0, 0.0), math.eval(), &cfg(0)).unwrap();
    assert!((r.mean_reward - 0.45).abs() < 1e-12);
}

#[test]
fn transfer_report() {
    let pol = policy(InitMode::Strong);
    let env = env(DomainTag::ReviewLength, 8, 80);
    let params = perfect_length_params(&pol, &env);
    let students = vec![
        StudentSpec::simulated("a", 1.0, 0.05),
        StudentSpec::simulated("b", 0.95, 0.10),
        StudentSpec::simulated("c", 0.9, 0.05),
        StudentSpec::simulated("deaf", 0.0, 0.05),
    ];
    let c = cfg(6);
    let rep = transfer_eval(&pol, &params, &env, &students, env.eval(), &c).unwrap();
    assert_eq!(rep.rows.len(), 4);
    let a = rep.rows[0].eval_mean_reward;
    assert!(a > 0.9);
    for row in &rep.rows[1..3] {
        assert!((row.eval_mean_reward - a).abs() <= 0.07, "{row:?}");
    }
    let deaf = build_student(&students[3]).unwrap();
    let base = no_advisor_baseline(&env, deaf.as_ref(), env.eval(), &c).unwrap();
    assert_eq!(rep.rows[3].eval_mean_reward, base.mean_reward);
    assert_eq!(transfer_eval(&pol, &params, &env, &students, env.eval(), &c).unwrap(), rep);
}

#[test]
fn out_of_domain_advice_leaves_correctness_alone() {
    let pol = policy(InitMode::Strong);
    let length_env = env(DomainTag::ReviewLength, 8, 8);
    let params = perfect_length_params(&pol, &length_env);
    let math = env(DomainTag::MathSolutions, 4, 1000);
    let mut spec = StudentSpec::simulated("s", 1.0, 0.05);
    spec.base_correctness = 0.62;
    let st = SimulatedStudent::new(spec);
    let c = cfg(8);
    let matched = robustness_eval(&pol, &params, &math, &st, math.eval(), &c, c.seed).unwrap();
    assert!(matched.matched_seeds);
    assert_eq!(matched.correctness_difference, 0.0);
    let independent = robustness_eval(&pol, &params, &math, &st, math.eval(), &c, 9).unwrap();
    assert!(!independent.matched_seeds);
    assert!(independent.correctness_difference.abs() < 0.05, "{independent:?}");
    assert!((independent.unadvised_correctness - 0.62).abs() < 0.05);
}

#[test]
fn robustness_needs_correctness() {
    let pol = policy(InitMode::Strong);
    let env = env(DomainTag::ReviewLength, 8, 8);
    let params = PolicyParams::zeros(&pol);
    let err = robustness_eval(&pol, &params, &env, &student(1.0, 0.0), env.eval(), &cfg(0), 0).unwrap_err();
    assert!(matches!(err, HarnessError::Mismatch(_)));
}

#[test]
fn ablation_arms_must_match() {
    let strong = policy(InitMode::Strong);
    let weak = policy(InitMode::Weak);
    let env = env(DomainTag::ReviewLevel, 20, 10);
    let st = student(1.0, 0.0);
    let grpo = GrpoConfig::default();
    let lc = TrainLoopConfig {
        epochs: 1,
        seed: 1,
        ..TrainLoopConfig::default()
    };
    let other = TrainLoopConfig { seed: 2, ..lc.clone() };
    let mk = |policy, loop_cfg| TrainSetup {
        policy,
        grpo: &grpo,
        loop_cfg,
        mode: PipelineMode::TwoStep,
        env: &env,
        student: &st,
    };
    let err = init_ablation(&mk(&strong, &lc), &mk(&weak, &other), 0.8).unwrap_err();
    assert!(matches!(err, HarnessError::Mismatch(_)));
    let rep = init_ablation(&mk(&strong, &lc), &mk(&weak, &lc), 0.8).unwrap();
    assert_eq!(rep.arms.len(), 2);
    for arm in rep.arms.values() {
        assert_eq!(arm.eval_curve.last().map(|p| p.1), Some(arm.final_reward));
    }
}
