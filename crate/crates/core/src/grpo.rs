//! Group Relative Policy Optimization.
//!
//! For each group of `G` advice samples drawn for the same task, rewards are
//! normalized within the group, `A_i = (r_i - mean(r)) / (std(r) + ε_adv)`
//! with the population standard deviation. The loss over a minibatch of
//! records is
//!
//! ```text
//! L = -mean_i min(ρ_i A_i, clip(ρ_i, 1-ε, 1+ε) A_i) + β · mean_i KL(π_θ(·|x_i) || π_ref(·|x_i))
//! ρ_i = exp(log π_θ(a_i|x_i) - log π_old(a_i|x_i))
//! ```
//!
//! with the KL computed exactly per categorical head and summed over the
//! active heads. Gradients are analytic; parameters move by Adam after
//! global-norm clipping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{
    action_picks, backward, categorical_kl, categorical_kl_grad, forward, ParamGradient,
    PolicyConfig, PolicyError, PolicyParams,
};
use crate::types::RolloutRecord;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GrpoError {
    #[error("group has {0} rewards, at least 2 are required")]
    GroupTooSmall(usize),
    #[error("non-finite loss or parameters ({0})")]
    NonFiniteLoss(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid group: {0}")]
    InvalidGroup(String),
    #[error("invalid GRPO config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub clip_epsilon: f64,
    pub kl_coeff: f64,
    pub adv_epsilon: f64,
    pub learning_rate: f64,
    pub update_epochs: usize,
    /// Groups per Adam step.
    pub minibatch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub max_grad_norm: f64,
    /// Re-snapshot the reference policy every this many updates; never when
    /// unset.
    pub ref_refresh_every: Option<usize>,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            group_size: 8,
            clip_epsilon: 0.2,
            kl_coeff: 0.01,
            adv_epsilon: 1e-8,
            learning_rate: 1e-3,
            update_epochs: 2,
            minibatch_size: 4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            max_grad_norm: 1.0,
            ref_refresh_every: None,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        let bad = |m: &str| Err(GrpoError::InvalidConfig(m.to_string()));
        if self.group_size < 2 {
            return bad("group_size must be >= 2");
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return bad("clip_epsilon must be in (0, 1)");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.kl_coeff < 0.0 || self.adv_epsilon < 0.0 {
            return bad("kl_coeff and adv_epsilon must be >= 0");
        }
        if self.update_epochs == 0 || self.minibatch_size == 0 {
            return bad("update_epochs and minibatch_size must be >= 1");
        }
        if !(self.max_grad_norm > 0.0) {
            return bad("max_grad_norm must be positive");
        }
        if self.ref_refresh_every == Some(0) {
            return bad("ref_refresh_every must be >= 1 when set");
        }
        Ok(())
    }
}

/// `G` rollouts of the same task and features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRollout {
    pub task_id: String,
    pub records: Vec<RolloutRecord>,
}

impl GroupRollout {
    pub fn validate(&self) -> Result<(), GrpoError> {
        if self.records.len() < 2 {
            return Err(GrpoError::GroupTooSmall(self.records.len()));
        }
        let first = &self.records[0];
        for r in &self.records {
            if r.task_id != self.task_id || r.features != first.features {
                return Err(GrpoError::InvalidGroup(format!(
                    "record for {} does not share the group's task/features",
                    r.task_id
                )));
            }
            if !r.reward.value.is_finite() {
                return Err(GrpoError::InvalidGroup("non-finite reward".into()));
            }
        }
        Ok(())
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.reward.value).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: PolicyParams,
    pub v: PolicyParams,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &PolicyParams) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    pub fn apply(&mut self, params: &mut PolicyParams, grad: &ParamGradient, config: &GrpoConfig) {
        self.step += 1;
        let (b1, b2) = (config.adam_beta1, config.adam_beta2);
        let t = self.step as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let lr = config.learning_rate;
        let eps = config.adam_eps;
        for (((p, g), m), v) in params
            .slices_mut()
            .into_iter()
            .zip(grad.slices())
            .zip(self.m.slices_mut())
            .zip(self.v.slices_mut())
        {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub mean_reward: f64,
    pub mean_advantage: f64,
    pub surrogate_loss: f64,
    pub kl_to_reference: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
    pub entropy_per_head: BTreeMap<String, f64>,
}

impl UpdateStats {
    /// Mean of the per-head entropies.
    pub fn mean_entropy(&self) -> f64 {
        if self.entropy_per_head.is_empty() {
            return 0.0;
        }
        self.entropy_per_head.values().sum::<f64>() / self.entropy_per_head.len() as f64
    }
}

/// Group-relative advantages with the population standard deviation.
/// A group whose rewards are all equal gets exactly zero advantages.
pub fn compute_advantages(rewards: &[f64], adv_epsilon: f64) -> Result<Vec<f64>, GrpoError> {
    if rewards.len() < 2 {
        return Err(GrpoError::GroupTooSmall(rewards.len()));
    }
    if rewards.iter().all(|&r| r == rewards[0]) {
        return Ok(vec![0.0; rewards.len()]);
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let denom = var.sqrt() + adv_epsilon;
    Ok(rewards.iter().map(|r| (r - mean) / denom).collect())
}

/// `min(ρA, clip(ρ, 1-ε, 1+ε)A)` and whether the clipped branch is binding.
pub fn clipped_term(ratio: f64, advantage: f64, clip_epsilon: f64) -> (f64, bool) {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - clip_epsilon, 1.0 + clip_epsilon) * advantage;
    let binding = (advantage > 0.0 && ratio > 1.0 + clip_epsilon)
        || (advantage < 0.0 && ratio < 1.0 - clip_epsilon);
    (unclipped.min(clipped), binding)
}

fn flatten_with_advantages<'a>(
    groups: &'a [GroupRollout],
    config: &GrpoConfig,
) -> Result<Vec<(&'a RolloutRecord, f64)>, GrpoError> {
    let mut out = Vec::new();
    for g in groups {
        g.validate()?;
        let adv = compute_advantages(&g.rewards(), config.adv_epsilon)?;
        out.extend(g.records.iter().zip(adv));
    }
    Ok(out)
}

fn loss_impl(
    policy: &PolicyConfig,
    params: &PolicyParams,
    ref_params: &PolicyParams,
    records: &[(&RolloutRecord, f64)],
    config: &GrpoConfig,
    mut grad: Option<&mut ParamGradient>,
) -> Result<(f64, UpdateStats), GrpoError> {
    if records.is_empty() {
        return Err(GrpoError::EmptyBatch);
    }
    let n = records.len() as f64;
    let mut term_sum = 0.0;
    let mut kl_sum = 0.0;
    let mut clipped = 0usize;
    let mut entropy: BTreeMap<String, (f64, usize)> = BTreeMap::new();

    for &(record, adv) in records {
        let dist = forward(policy, params, &record.features)?;
        let ref_dist = forward(policy, ref_params, &record.features)?;
        let picks = action_picks(policy, &dist, &record.action)?;
        let new_lp: f64 = picks.iter().map(|&(h, i)| dist.log_probs(h)[i]).sum();
        let ratio = (new_lp - record.old_log_prob).exp();
        let (term, binding) = clipped_term(ratio, adv, config.clip_epsilon);
        term_sum += term;
        clipped += usize::from(binding);

        let mut kl = 0.0;
        for (h, _) in &picks {
            kl += categorical_kl(&dist.logits[*h], &ref_dist.logits[*h]);
            let e = entropy.entry(policy.heads[*h].name.clone()).or_insert((0.0, 0));
            e.0 += dist.entropy(*h);
            e.1 += 1;
        }
        kl_sum += kl;

        if let Some(g) = grad.as_deref_mut() {
            // d(-term/n)/dlogπ is -ρA/n on the unclipped branch, 0 otherwise
            let pg_coef = if binding { 0.0 } else { -ratio * adv / n };
            let kl_coef = config.kl_coeff / n;
            let logit_grads: Vec<(usize, Vec<f64>)> = picks
                .iter()
                .map(|&(h, i)| {
                    let probs = dist.probs(h);
                    let kl_g = categorical_kl_grad(&dist.logits[h], &ref_dist.logits[h]);
                    let dz = probs
                        .iter()
                        .enumerate()
                        .map(|(j, p)| {
                            let onehot = if j == i { 1.0 } else { 0.0 };
                            pg_coef * (onehot - p) + kl_coef * kl_g[j]
                        })
                        .collect();
                    (h, dz)
                })
                .collect();
            backward(params, &dist, &logit_grads, 1.0, g);
        }
    }

    let kl_mean = kl_sum / n;
    let loss = -term_sum / n + config.kl_coeff * kl_mean;
    let stats = UpdateStats {
        mean_reward: records.iter().map(|(r, _)| r.reward.value).sum::<f64>() / n,
        mean_advantage: records.iter().map(|(_, a)| a).sum::<f64>() / n,
        surrogate_loss: loss,
        kl_to_reference: kl_mean,
        clip_fraction: clipped as f64 / n,
        grad_norm: 0.0,
        entropy_per_head: entropy
            .into_iter()
            .map(|(k, (s, c))| (k, s / c as f64))
            .collect(),
    };
    Ok((loss, stats))
}

/// Loss and statistics for a set of groups, without gradients.
pub fn surrogate_loss(
    policy: &PolicyConfig,
    params: &PolicyParams,
    ref_params: &PolicyParams,
    groups: &[GroupRollout],
    config: &GrpoConfig,
) -> Result<(f64, UpdateStats), GrpoError> {
    let records = flatten_with_advantages(groups, config)?;
    loss_impl(policy, params, ref_params, &records, config, None)
}

/// Loss, its exact gradient and statistics.
pub fn loss_and_grad(
    policy: &PolicyConfig,
    params: &PolicyParams,
    ref_params: &PolicyParams,
    groups: &[GroupRollout],
    config: &GrpoConfig,
) -> Result<(f64, ParamGradient, UpdateStats), GrpoError> {
    let records = flatten_with_advantages(groups, config)?;
    let mut grad = params.zeros_like();
    let (loss, mut stats) = loss_impl(policy, params, ref_params, &records, config, Some(&mut grad))?;
    stats.grad_norm = grad.norm();
    Ok((loss, grad, stats))
}

/// Run `update_epochs` passes over `batch` in minibatches of
/// `minibatch_size` groups, one clipped Adam step per minibatch.
/// `ref_params` is never modified.
pub fn update(
    policy: &PolicyConfig,
    params: &mut PolicyParams,
    ref_params: &PolicyParams,
    batch: &[GroupRollout],
    config: &GrpoConfig,
    adam: &mut AdamState,
) -> Result<UpdateStats, GrpoError> {
    if batch.is_empty() {
        return Err(GrpoError::EmptyBatch);
    }
    let all = flatten_with_advantages(batch, config)?;
    let n_all = all.len() as f64;
    let mut acc = UpdateStats {
        mean_reward: all.iter().map(|(r, _)| r.reward.value).sum::<f64>() / n_all,
        mean_advantage: all.iter().map(|(_, a)| a).sum::<f64>() / n_all,
        ..UpdateStats::default()
    };
    let mut steps = 0usize;
    let mut entropy_first_pass: BTreeMap<String, (f64, usize)> = BTreeMap::new();

    for epoch in 0..config.update_epochs {
        for chunk in batch.chunks(config.minibatch_size) {
            let (loss, mut grad, stats) = loss_and_grad(policy, params, ref_params, chunk, config)?;
            if !loss.is_finite() || !grad.is_finite() {
                return Err(GrpoError::NonFiniteLoss(format!("loss {loss}")));
            }
            let norm = stats.grad_norm;
            if norm > config.max_grad_norm {
                grad.scale(config.max_grad_norm / norm);
            }
            adam.apply(params, &grad, config);
            if !params.is_finite() {
                return Err(GrpoError::NonFiniteLoss("parameters diverged".into()));
            }
            acc.surrogate_loss += stats.surrogate_loss;
            acc.kl_to_reference += stats.kl_to_reference;
            acc.clip_fraction += stats.clip_fraction;
            acc.grad_norm += norm;
            if epoch == 0 {
                let weight = chunk.iter().map(|g| g.records.len()).sum::<usize>();
                for (k, v) in stats.entropy_per_head {
                    let e = entropy_first_pass.entry(k).or_insert((0.0, 0));
                    e.0 += v * weight as f64;
                    e.1 += weight;
                }
            }
            steps += 1;
        }
    }
    let s = steps as f64;
    acc.surrogate_loss /= s;
    acc.kl_to_reference /= s;
    acc.clip_fraction /= s;
    acc.grad_norm /= s;
    acc.entropy_per_head = entropy_first_pass
        .into_iter()
        .map(|(k, (sum, w))| (k, sum / w as f64))
        .collect();
    Ok(acc)
}
