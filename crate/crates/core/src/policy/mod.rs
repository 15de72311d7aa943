//! The advisor: a context-conditioned stochastic policy over structured
//! advice actions.
//!
//! An action picks one option per advice axis ("head"). Heads are sampled
//! independently from per-head softmax distributions, so the log-probability
//! of an action is the sum of per-head log-probabilities, and the gradient
//! with respect to head `k`'s logits is `onehot(choice) - softmax(logits)`.
//! Everything below the heads is a single tanh layer over the user embedding
//! concatenated with the public context features; gradients are derived by
//! hand (see [`backward`]).

mod params;
mod render;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use params::{init_params, HeadWeights, Matrix, NamedTensor, ParamGradient, PolicyParams};
pub use render::{render_advice, AdviceTemplates, DEFAULT_LENGTH_BUCKETS};

use crate::rng::RngStream;
use crate::students::AttemptSummary;
use crate::types::{DomainTag, TaskInstance, UserIndex};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("unknown user {0:?}")]
    UnknownUser(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("action heads do not match the active heads: {0}")]
    HeadMismatch(String),
    #[error("missing template for {0}")]
    MissingTemplate(String),
    #[error("invalid policy config: {0}")]
    InvalidConfig(String),
}

/// Side-info key holding the comma-separated candidate glossary entry ids.
pub const GLOSSARY_CANDIDATES_KEY: &str = "candidates";
/// Attempt word counts are normalized by this many words.
pub const MAX_LENGTH_WORDS: f64 = 1000.0;
const ATTEMPT_DIM: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Each domain samples only the heads relevant to it.
    Strong,
    /// Every head is sampled (and rendered) for every domain.
    Weak,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "axis", rename_all = "snake_case")]
pub enum HeadKind {
    LengthBucket,
    ReadingLevel,
    IncludeQuestions,
    IncludeMultiMethods,
    GlossaryInclude { entry_id: String },
}

impl HeadKind {
    fn relevant_to(&self, domain: DomainTag) -> bool {
        matches!(
            (self, domain),
            (HeadKind::LengthBucket, DomainTag::ReviewLength)
                | (HeadKind::ReadingLevel, DomainTag::ReviewLevel)
                | (HeadKind::IncludeQuestions, DomainTag::MathSolutions)
                | (HeadKind::IncludeMultiMethods, DomainTag::MathSolutions)
                | (HeadKind::GlossaryInclude { .. }, DomainTag::GlossaryTranslation)
        )
    }
}

/// One advice axis: `arity` options, each rendered by `templates[i]` with
/// `{value}` replaced by `values[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub name: String,
    pub kind: HeadKind,
    pub arity: usize,
    pub templates: Vec<String>,
    pub values: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub users: UserIndex,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub heads: Vec<HeadSpec>,
    pub init_mode: InitMode,
    pub init_scale: f64,
}

impl PolicyConfig {
    pub fn new(users: UserIndex, heads: Vec<HeadSpec>, init_mode: InitMode) -> Self {
        PolicyConfig {
            users,
            embed_dim: 16,
            hidden_dim: 32,
            heads,
            init_mode,
            init_scale: 0.05,
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        let bad = |m: String| Err(PolicyError::InvalidConfig(m));
        if self.embed_dim == 0 || self.hidden_dim == 0 {
            return bad("embed_dim and hidden_dim must be >= 1".into());
        }
        if self.users.is_empty() {
            return bad("user vocabulary is empty".into());
        }
        if self.heads.is_empty() {
            return bad("at least one head is required".into());
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return bad(format!("init_scale {} must be finite and >= 0", self.init_scale));
        }
        for (i, h) in self.heads.iter().enumerate() {
            if h.arity < 2 || h.templates.len() != h.arity || h.values.len() != h.arity {
                return bad(format!(
                    "head {} needs arity >= 2 with one template and value per option",
                    h.name
                ));
            }
            if self.heads[..i].iter().any(|o| o.name == h.name) {
                return bad(format!("duplicate head name {}", h.name));
            }
        }
        if self.init_mode == InitMode::Strong {
            for d in DomainTag::ALL {
                if !self.heads.iter().any(|h| h.kind.relevant_to(d)) {
                    return bad(format!("strong mode has no head for domain {d}"));
                }
            }
        }
        Ok(())
    }

    pub fn glossary_heads(&self) -> impl Iterator<Item = (usize, &str)> {
        self.heads.iter().enumerate().filter_map(|(i, h)| match &h.kind {
            HeadKind::GlossaryInclude { entry_id } => Some((i, entry_id.as_str())),
            _ => None,
        })
    }

    pub fn glossary_len(&self) -> usize {
        self.glossary_heads().count()
    }

    /// Domain one-hot + attempt summary + glossary presence bits.
    pub fn feature_dim(&self) -> usize {
        DomainTag::ALL.len() + ATTEMPT_DIM + self.glossary_len()
    }

    pub fn input_dim(&self) -> usize {
        self.embed_dim + self.feature_dim()
    }

    pub fn head_index(&self, name: &str) -> Option<usize> {
        self.heads.iter().position(|h| h.name == name)
    }

    /// Which heads are sampled for this context.
    pub fn active_heads(&self, features: &ContextFeatures) -> Vec<bool> {
        match self.init_mode {
            InitMode::Weak => vec![true; self.heads.len()],
            InitMode::Strong => {
                let domain = features.domain();
                let mut glossary_slot = 0;
                self.heads
                    .iter()
                    .map(|h| match h.kind {
                        HeadKind::GlossaryInclude { .. } => {
                            let present = features
                                .glossary_presence
                                .as_ref()
                                .and_then(|p| p.get(glossary_slot).copied())
                                .unwrap_or(false);
                            glossary_slot += 1;
                            domain == DomainTag::GlossaryTranslation && present
                        }
                        ref k => k.relevant_to(domain),
                    })
                    .collect()
            }
        }
    }

    /// Public features of a task (plus the student's first attempt in
    /// three-step mode). Nothing here depends on hidden latents.
    pub fn featurize(
        &self,
        task: &TaskInstance,
        attempt: Option<&AttemptSummary>,
    ) -> Result<ContextFeatures, PolicyError> {
        let user_index = self
            .users
            .get(&task.user_id)
            .ok_or_else(|| PolicyError::UnknownUser(task.user_id.clone()))?;
        let glossary_presence = task.side_info.get(GLOSSARY_CANDIDATES_KEY).map(|list| {
            let ids: Vec<&str> = list.split(',').map(str::trim).collect();
            self.glossary_heads()
                .map(|(_, id)| ids.contains(&id))
                .collect::<Vec<bool>>()
        });
        Ok(ContextFeatures {
            user_index,
            domain_onehot: task.domain_tag.onehot(),
            attempt_summary: attempt.map(AttemptSummary::to_features),
            glossary_presence,
        })
    }
}

/// Conditioning input of the advisor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextFeatures {
    pub user_index: usize,
    pub domain_onehot: [f64; 4],
    pub attempt_summary: Option<[f64; 3]>,
    pub glossary_presence: Option<Vec<bool>>,
}

impl ContextFeatures {
    pub fn domain(&self) -> DomainTag {
        let i = self
            .domain_onehot
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0);
        DomainTag::ALL[i]
    }

    /// Dense feature vector of length `4 + 3 + glossary_len`.
    pub fn dense(&self, glossary_len: usize) -> Result<Vec<f64>, PolicyError> {
        let mut v = Vec::with_capacity(DomainTag::ALL.len() + ATTEMPT_DIM + glossary_len);
        v.extend_from_slice(&self.domain_onehot);
        v.extend_from_slice(&self.attempt_summary.unwrap_or([0.0; ATTEMPT_DIM]));
        match &self.glossary_presence {
            Some(p) if p.len() != glossary_len => {
                return Err(PolicyError::ShapeMismatch(format!(
                    "glossary presence has {} bits, policy expects {glossary_len}",
                    p.len()
                )))
            }
            Some(p) => v.extend(p.iter().map(|&b| if b { 1.0 } else { 0.0 })),
            None => v.extend(std::iter::repeat_n(0.0, glossary_len)),
        }
        Ok(v)
    }
}

/// A structured advice decision and its rendered text.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AdviceAction {
    pub choices: BTreeMap<String, usize>,
    pub rendered_text: String,
}

impl AdviceAction {
    /// Build an action from `(head index, choice)` pairs, rendering the text.
    pub fn from_choices(config: &PolicyConfig, picks: &[(usize, usize)]) -> Result<Self, PolicyError> {
        let rendered_text = render_advice(&config.heads, picks)?;
        Ok(AdviceAction {
            choices: picks
                .iter()
                .map(|&(h, i)| (config.heads[h].name.clone(), i))
                .collect(),
            rendered_text,
        })
    }
}

/// Per-head logits for one context, with the activations needed for
/// backpropagation.
#[derive(Debug, Clone)]
pub struct ActionDistribution {
    pub logits: Vec<Vec<f64>>,
    pub active: Vec<bool>,
    user_index: usize,
    input: Vec<f64>,
    hidden: Vec<f64>,
}

impl ActionDistribution {
    pub fn log_probs(&self, head: usize) -> Vec<f64> {
        log_softmax(&self.logits[head])
    }

    pub fn probs(&self, head: usize) -> Vec<f64> {
        self.log_probs(head).into_iter().map(f64::exp).collect()
    }

    pub fn entropy(&self, head: usize) -> f64 {
        self.log_probs(head)
            .into_iter()
            .map(|lp| if lp.is_finite() { -lp.exp() * lp } else { 0.0 })
            .sum()
    }

    pub fn active_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.active
            .iter()
            .enumerate()
            .filter_map(|(i, &a)| a.then_some(i))
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

/// `KL(p || q)` for two categoricals given by logits.
pub fn categorical_kl(p_logits: &[f64], q_logits: &[f64]) -> f64 {
    let lp = log_softmax(p_logits);
    let lq = log_softmax(q_logits);
    lp.iter()
        .zip(&lq)
        .map(|(a, b)| if a.is_finite() { a.exp() * (a - b) } else { 0.0 })
        .sum::<f64>()
        .max(0.0)
}

/// Gradient of `KL(softmax(p) || softmax(q))` with respect to `p`:
/// `p_j * (log p_j - log q_j - KL)`.
pub fn categorical_kl_grad(p_logits: &[f64], q_logits: &[f64]) -> Vec<f64> {
    let lp = log_softmax(p_logits);
    let lq = log_softmax(q_logits);
    let kl: f64 = lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum();
    lp.iter()
        .zip(&lq)
        .map(|(a, b)| a.exp() * (a - b - kl))
        .collect()
}

pub fn forward(
    config: &PolicyConfig,
    params: &PolicyParams,
    features: &ContextFeatures,
) -> Result<ActionDistribution, PolicyError> {
    if features.user_index >= params.user_embedding.rows {
        return Err(PolicyError::ShapeMismatch(format!(
            "user index {} outside embedding table of {} rows",
            features.user_index, params.user_embedding.rows
        )));
    }
    if params.heads.len() != config.heads.len() || params.hidden_weights.cols != config.input_dim() {
        return Err(PolicyError::ShapeMismatch(
            "parameters do not match the policy config".into(),
        ));
    }
    let mut input = params.user_embedding.row(features.user_index).to_vec();
    input.extend(features.dense(config.glossary_len())?);

    let hidden: Vec<f64> = (0..params.hidden_weights.rows)
        .map(|r| {
            let pre = params.hidden_bias[r]
                + params
                    .hidden_weights
                    .row(r)
                    .iter()
                    .zip(&input)
                    .map(|(w, x)| w * x)
                    .sum::<f64>();
            pre.tanh()
        })
        .collect();

    let logits = params
        .heads
        .iter()
        .map(|h| {
            (0..h.weights.rows)
                .map(|a| {
                    h.bias[a]
                        + h.weights
                            .row(a)
                            .iter()
                            .zip(&hidden)
                            .map(|(w, x)| w * x)
                            .sum::<f64>()
                })
                .collect()
        })
        .collect();

    Ok(ActionDistribution {
        logits,
        active: config.active_heads(features),
        user_index: features.user_index,
        input,
        hidden,
    })
}

/// Accumulate `scale * dL/dθ` into `grad`, given `dL/dlogits` for some heads.
pub fn backward(
    params: &PolicyParams,
    dist: &ActionDistribution,
    logit_grads: &[(usize, Vec<f64>)],
    scale: f64,
    grad: &mut ParamGradient,
) {
    let hidden_dim = dist.hidden.len();
    let mut d_hidden = vec![0.0; hidden_dim];
    for (head, dz) in logit_grads {
        let hw = &params.heads[*head];
        let gh = &mut grad.heads[*head];
        for (a, &dza) in dz.iter().enumerate() {
            if dza == 0.0 {
                continue;
            }
            let g = scale * dza;
            gh.bias[a] += g;
            let grow = gh.weights.row_mut(a);
            for (gw, h) in grow.iter_mut().zip(&dist.hidden) {
                *gw += g * h;
            }
            for (dh, w) in d_hidden.iter_mut().zip(hw.weights.row(a)) {
                *dh += g * w;
            }
        }
    }
    let embed_dim = params.user_embedding.cols;
    let mut d_input = vec![0.0; dist.input.len()];
    for r in 0..hidden_dim {
        let d_pre = d_hidden[r] * (1.0 - dist.hidden[r] * dist.hidden[r]);
        if d_pre == 0.0 {
            continue;
        }
        grad.hidden_bias[r] += d_pre;
        let wrow = params.hidden_weights.row(r);
        let grow = grad.hidden_weights.row_mut(r);
        for c in 0..dist.input.len() {
            grow[c] += d_pre * dist.input[c];
            d_input[c] += d_pre * wrow[c];
        }
    }
    let erow = grad.user_embedding.row_mut(dist.user_index);
    for (g, d) in erow.iter_mut().zip(&d_input[..embed_dim]) {
        *g += d;
    }
}

fn inverse_cdf(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // u landed in the rounding gap above the last cumulative sum
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Sample one option per active head (temperature 1). Returns the action and
/// its total log-probability.
pub fn sample_action(
    config: &PolicyConfig,
    dist: &ActionDistribution,
    rng: &mut RngStream,
) -> Result<(AdviceAction, f64), PolicyError> {
    let mut picks = Vec::new();
    let mut log_prob = 0.0;
    for h in dist.active_indices() {
        let lps = dist.log_probs(h);
        let probs: Vec<f64> = lps.iter().map(|lp| lp.exp()).collect();
        let idx = inverse_cdf(&probs, rng.next_f64());
        log_prob += lps[idx];
        picks.push((h, idx));
    }
    Ok((AdviceAction::from_choices(config, &picks)?, log_prob))
}

/// Argmax per active head; exact ties are broken uniformly with `rng`.
pub fn greedy_action(
    config: &PolicyConfig,
    dist: &ActionDistribution,
    rng: &mut RngStream,
) -> Result<AdviceAction, PolicyError> {
    let mut picks = Vec::new();
    for h in dist.active_indices() {
        let logits = &dist.logits[h];
        let best = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let tied: Vec<usize> = (0..logits.len()).filter(|&i| logits[i] == best).collect();
        let idx = if tied.len() == 1 {
            tied[0]
        } else {
            tied[rng.below(tied.len())]
        };
        picks.push((h, idx));
    }
    AdviceAction::from_choices(config, &picks)
}

/// `(head, choice)` pairs of `action`, validated against the active heads.
pub fn action_picks(
    config: &PolicyConfig,
    dist: &ActionDistribution,
    action: &AdviceAction,
) -> Result<Vec<(usize, usize)>, PolicyError> {
    let mut picks = Vec::new();
    for h in dist.active_indices() {
        let spec = &config.heads[h];
        let idx = *action
            .choices
            .get(&spec.name)
            .ok_or_else(|| PolicyError::HeadMismatch(format!("no choice for head {}", spec.name)))?;
        if idx >= spec.arity {
            return Err(PolicyError::HeadMismatch(format!(
                "choice {idx} out of range for head {} of arity {}",
                spec.name, spec.arity
            )));
        }
        picks.push((h, idx));
    }
    if picks.len() != action.choices.len() {
        return Err(PolicyError::HeadMismatch(format!(
            "action has {} choices, {} heads are active",
            action.choices.len(),
            picks.len()
        )));
    }
    Ok(picks)
}

pub fn log_prob_of(
    config: &PolicyConfig,
    dist: &ActionDistribution,
    action: &AdviceAction,
) -> Result<f64, PolicyError> {
    Ok(action_picks(config, dist, action)?
        .into_iter()
        .map(|(h, i)| dist.log_probs(h)[i])
        .sum())
}

pub fn log_prob(
    config: &PolicyConfig,
    params: &PolicyParams,
    features: &ContextFeatures,
    action: &AdviceAction,
) -> Result<f64, PolicyError> {
    let dist = forward(config, params, features)?;
    log_prob_of(config, &dist, action)
}

/// `d/dlogits log π(choice)` for each active head: `onehot - softmax`.
pub fn log_prob_logit_grads(
    config: &PolicyConfig,
    dist: &ActionDistribution,
    action: &AdviceAction,
) -> Result<Vec<(usize, Vec<f64>)>, PolicyError> {
    Ok(action_picks(config, dist, action)?
        .into_iter()
        .map(|(h, i)| {
            let mut g: Vec<f64> = dist.probs(h).into_iter().map(|p| -p).collect();
            g[i] += 1.0;
            (h, g)
        })
        .collect())
}

/// Exact gradient of [`log_prob`] with respect to every parameter.
pub fn grad_log_prob(
    config: &PolicyConfig,
    params: &PolicyParams,
    features: &ContextFeatures,
    action: &AdviceAction,
) -> Result<ParamGradient, PolicyError> {
    let dist = forward(config, params, features)?;
    let dz = log_prob_logit_grads(config, &dist, action)?;
    let mut grad = params.zeros_like();
    backward(params, &dist, &dz, 1.0, &mut grad);
    Ok(grad)
}
