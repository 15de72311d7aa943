//! Seeded task generators, hidden-latent stores and reward functions.
//!
//! An [`Environment`] is the only component that reads [`LatentPayload`]s:
//! the advisor sees tasks, students see tasks plus advice, and only
//! [`Environment::score`] compares the student's output against the user's
//! hidden preference.

mod chrf;
mod dataset;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use chrf::{chrf, ngram_statistics, score_from_statistics, ChrfConfig};
pub use dataset::{export_dataset, import_dataset, read_tasks_jsonl, write_tasks_jsonl};

use crate::policy::GLOSSARY_CANDIDATES_KEY;
use crate::rng::RngStream;
use crate::students::StudentResponse;
use crate::types::{
    DomainTag, GlossaryEntry, HiddenLatent, LatentPayload, ReadingLevel, Reward, TaskInstance,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("preferred length must be positive")]
    NonPositivePreference,
    #[error("chrF reference is empty")]
    EmptyReference,
    #[error("invalid chrF config: {0}")]
    InvalidChrfConfig(String),
    #[error("invalid environment spec: {0}")]
    InvalidSpec(String),
    #[error("dataset io: {0}")]
    Io(String),
}

/// Side-info key holding the space-separated source passage of a
/// translation task.
pub const PASSAGE_KEY: &str = "passage";

/// Shared user names; every shipped environment draws its users from the
/// front of this list, so a policy trained on a larger user set can be
/// applied to a smaller one.
pub const USER_NAMES: [&str; 8] = ["alice", "bob", "carol", "dave", "erin", "frank", "grace", "heidi"];

/// Preferred lengths of the eight shipped review-length users.
pub const SHIPPED_LENGTH_LATENTS: [u32; 8] = [10, 22, 48, 104, 226, 491, 748, 1000];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentSpec {
    pub domain_tag: DomainTag,
    pub users: Vec<HiddenLatent>,
    pub train_tasks: usize,
    pub eval_tasks: usize,
    pub seed: u64,
    #[serde(default)]
    pub chrf: ChrfConfig,
}

impl EnvironmentSpec {
    /// The shipped user set for `domain`.
    pub fn shipped(domain: DomainTag, train_tasks: usize, eval_tasks: usize, seed: u64) -> Self {
        EnvironmentSpec {
            domain_tag: domain,
            users: shipped_users(domain),
            train_tasks,
            eval_tasks,
            seed,
            chrf: ChrfConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: String| Err(EnvError::InvalidSpec(m));
        if self.users.is_empty() {
            return bad("no users".into());
        }
        for (i, u) in self.users.iter().enumerate() {
            if u.kind() != self.domain_tag {
                return bad(format!("user {} has a {} latent in a {} environment", u.user_id, u.kind(), self.domain_tag));
            }
            if self.users[..i].iter().any(|o| o.user_id == u.user_id) {
                return bad(format!("user {} listed twice", u.user_id));
            }
            match &u.latent {
                LatentPayload::ReviewLength { preferred_length } if *preferred_length == 0 => {
                    return Err(EnvError::NonPositivePreference)
                }
                LatentPayload::GlossaryTranslation { gold_glossary_ids } => {
                    for id in gold_glossary_ids {
                        if !default_glossary().iter().any(|e| &e.entry_id == id) {
                            return bad(format!("unknown glossary entry {id}"));
                        }
                    }
                }
                _ => {}
            }
        }
        self.chrf.validate()
    }
}

pub fn shipped_users(domain: DomainTag) -> Vec<HiddenLatent> {
    let make = |i: usize, latent: LatentPayload| HiddenLatent {
        user_id: USER_NAMES[i].to_string(),
        latent,
    };
    match domain {
        DomainTag::ReviewLength => SHIPPED_LENGTH_LATENTS
            .iter()
            .enumerate()
            .map(|(i, &l)| make(i, LatentPayload::ReviewLength { preferred_length: l }))
            .collect(),
        DomainTag::ReviewLevel => ReadingLevel::ALL
            .iter()
            .enumerate()
            .map(|(i, &l)| make(i, LatentPayload::ReviewLevel { preferred_level: l }))
            .collect(),
        DomainTag::MathSolutions => [(false, false), (true, false), (false, true), (true, true)]
            .iter()
            .enumerate()
            .map(|(i, &(q, m))| {
                make(
                    i,
                    LatentPayload::MathSolutions {
                        pref_questions: q,
                        pref_multi_methods: m,
                    },
                )
            })
            .collect(),
        DomainTag::GlossaryTranslation => [["g1", "g4", "g5", "g8"], ["g2", "g3", "g6", "g7"]]
            .iter()
            .enumerate()
            .map(|(i, ids)| {
                make(
                    i,
                    LatentPayload::GlossaryTranslation {
                        gold_glossary_ids: ids.iter().map(|s| s.to_string()).collect(),
                    },
                )
            })
            .collect(),
    }
}

const GLOSSARY_TABLE: [(&str, &str, &str); 4] = [
    ("ka", "water", "fire"),
    ("ru", "house", "river"),
    ("mi", "mother", "moon"),
    ("to", "eat", "walk"),
];

/// The translation glossary: two candidate renderings per source token,
/// `g{2i+1}` and `g{2i+2}` for source token `i`.
pub fn default_glossary() -> Vec<GlossaryEntry> {
    GLOSSARY_TABLE
        .iter()
        .enumerate()
        .flat_map(|(i, (src, a, b))| {
            [(2 * i + 1, a), (2 * i + 2, b)].map(|(k, tgt)| GlossaryEntry {
                entry_id: format!("g{k}"),
                source_token: src.to_string(),
                target_token: tgt.to_string(),
            })
        })
        .collect()
}

/// `1 / (1 + |L - L*| / L*)`.
pub fn length_reward(review_length: u32, preferred_length: u32) -> Result<f64, EnvError> {
    if preferred_length == 0 {
        return Err(EnvError::NonPositivePreference);
    }
    let pref = f64::from(preferred_length);
    let rel = (f64::from(review_length) - pref).abs() / pref;
    Ok(1.0 / (1.0 + rel))
}

pub fn level_reward(declared: ReadingLevel, preferred: ReadingLevel) -> f64 {
    if declared == preferred {
        1.0
    } else {
        0.0
    }
}

/// 0 if no preference is met, 0.4 if exactly one is, 1 if both are.
pub fn math_pref_reward(questions_met: bool, methods_met: bool) -> f64 {
    match (questions_met, methods_met) {
        (true, true) => 1.0,
        (false, false) => 0.0,
        _ => 0.4,
    }
}

/// Mean length reward of writing `length` words for every user in `prefs`.
pub fn mean_length_reward(length: u32, prefs: &[u32]) -> f64 {
    prefs
        .iter()
        .map(|&p| length_reward(length, p).unwrap_or(0.0))
        .sum::<f64>()
        / prefs.len() as f64
}

/// Best single length from `grid` for all users, by exhaustive search.
pub fn optimal_static_length(prefs: &[u32], grid: &[u32]) -> (u32, f64) {
    grid.iter()
        .map(|&l| (l, mean_length_reward(l, prefs)))
        .fold((0, f64::NEG_INFINITY), |best, c| if c.1 > best.1 { c } else { best })
}

/// Mean reward when every user gets their own best grid length.
pub fn per_user_optimal_length_reward(prefs: &[u32], grid: &[u32]) -> f64 {
    prefs
        .iter()
        .map(|&p| {
            grid.iter()
                .map(|&l| length_reward(l, p).unwrap_or(0.0))
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / prefs.len() as f64
}

const TITLES: [&str; 24] = [
    "Harbor Lights", "The Quiet Orchard", "Iron Meridian", "Paper Lanterns", "North of Winter",
    "The Glass Cartographer", "Saltwater Hymns", "A Field of Clocks", "Midnight Atlas",
    "The Last Lighthouse", "Copper Sky", "Echoes in Amber", "The Weaver's Son", "Velvet Static",
    "Tidewater", "The Orchid Ledger", "Falling Upward", "Small Hours", "The Borrowed Crown",
    "Lantern Street", "Granite and Gold", "The Silent Canal", "Morning Parade", "Distant Thunder",
];
const MEDIA: [&str; 3] = ["book", "movie", "TV show"];

/// A seeded environment: task splits plus the latent store.
#[derive(Debug, Clone)]
pub struct Environment {
    spec: EnvironmentSpec,
    glossary: Vec<GlossaryEntry>,
    latents: HashMap<String, LatentPayload>,
    train: Vec<TaskInstance>,
    eval: Vec<TaskInstance>,
}

impl Environment {
    pub fn build(spec: EnvironmentSpec) -> Result<Self, EnvError> {
        spec.validate()?;
        let mut rng = RngStream::derive_stream(spec.seed, "env-task");
        let (train, eval) = make_dataset(&spec, &mut rng);
        Self::from_parts(spec, train, eval)
    }

    /// Assemble an environment from pre-built (for example imported) splits.
    pub fn from_parts(spec: EnvironmentSpec, train: Vec<TaskInstance>, eval: Vec<TaskInstance>) -> Result<Self, EnvError> {
        spec.validate()?;
        let latents: HashMap<String, LatentPayload> = spec
            .users
            .iter()
            .map(|u| (u.user_id.clone(), u.latent.clone()))
            .collect();
        let mut ids = BTreeSet::new();
        for t in train.iter().chain(&eval) {
            if !ids.insert(t.task_id.as_str()) {
                return Err(EnvError::InvalidSpec(format!("duplicate task id {}", t.task_id)));
            }
            if !latents.contains_key(&t.user_id) || t.domain_tag != spec.domain_tag {
                return Err(EnvError::InvalidSpec(format!(
                    "task {} has no matching {} latent",
                    t.task_id, spec.domain_tag
                )));
            }
        }
        Ok(Environment {
            spec,
            glossary: default_glossary(),
            latents,
            train,
            eval,
        })
    }

    pub fn spec(&self) -> &EnvironmentSpec {
        &self.spec
    }

    pub fn domain(&self) -> DomainTag {
        self.spec.domain_tag
    }

    pub fn train(&self) -> &[TaskInstance] {
        &self.train
    }

    pub fn eval(&self) -> &[TaskInstance] {
        &self.eval
    }

    pub fn user_ids(&self) -> Vec<String> {
        self.spec.users.iter().map(|u| u.user_id.clone()).collect()
    }

    pub fn glossary(&self) -> &[GlossaryEntry] {
        &self.glossary
    }

    /// Preferred lengths of a review-length environment's users, in user
    /// order (empty for other domains). Used by the static-advice oracles.
    pub fn length_preferences(&self) -> Vec<u32> {
        self.spec
            .users
            .iter()
            .filter_map(|u| match u.latent {
                LatentPayload::ReviewLength { preferred_length } => Some(preferred_length),
                _ => None,
            })
            .collect()
    }

    /// Reference translation: every passage token mapped through the
    /// user's gold glossary entries.
    pub fn gold_translation(&self, task: &TaskInstance) -> Option<String> {
        let Some(LatentPayload::GlossaryTranslation { gold_glossary_ids }) = self.latents.get(&task.user_id) else {
            return None;
        };
        let passage = task.side_info.get(PASSAGE_KEY)?;
        Some(
            passage
                .split_whitespace()
                .map(|tok| {
                    self.glossary
                        .iter()
                        .find(|e| e.source_token == tok && gold_glossary_ids.contains(&e.entry_id))
                        .map(|e| e.target_token.as_str())
                        .unwrap_or(tok)
                })
                .collect::<Vec<_>>()
                .join(" "),
        )
    }

    /// Reward for a student response. Never fails: anything that cannot be
    /// judged scores 0 with a `malformed` component.
    pub fn score(&self, task: &TaskInstance, response: &StudentResponse) -> Reward {
        let Some(latent) = self.latents.get(&task.user_id) else {
            return Reward::malformed();
        };
        let m = &response.measured;
        match latent {
            LatentPayload::ReviewLength { preferred_length } => {
                match length_reward(m.word_count, *preferred_length) {
                    Ok(v) => Reward::scalar(v),
                    Err(_) => Reward::malformed(),
                }
            }
            LatentPayload::ReviewLevel { preferred_level } => match m.declared_level {
                Some(level) => Reward::scalar(level_reward(level, *preferred_level)),
                None => Reward::malformed(),
            },
            LatentPayload::MathSolutions {
                pref_questions,
                pref_multi_methods,
            } => {
                let q = m.has_questions == *pref_questions;
                let mm = m.has_multi_methods == *pref_multi_methods;
                let components = BTreeMap::from([
                    ("questions".to_string(), f64::from(u8::from(q))),
                    ("methods".to_string(), f64::from(u8::from(mm))),
                ]);
                Reward::with_components(math_pref_reward(q, mm), components)
            }
            LatentPayload::GlossaryTranslation { .. } => {
                let (Some(hyp), Some(gold)) = (m.translation.as_deref(), self.gold_translation(task)) else {
                    return Reward::malformed();
                };
                match chrf(hyp, &gold, &self.spec.chrf) {
                    Ok(score) => Reward::with_components(
                        score / 100.0,
                        BTreeMap::from([("chrf".to_string(), score)]),
                    ),
                    Err(_) => Reward::malformed(),
                }
            }
        }
    }
}

/// Generate the train and eval splits. Users are assigned round-robin within
/// each split so every user is (near-)equally represented.
pub fn make_dataset(spec: &EnvironmentSpec, rng: &mut RngStream) -> (Vec<TaskInstance>, Vec<TaskInstance>) {
    let glossary = default_glossary();
    let mut split = |name: &str, n: usize| -> Vec<TaskInstance> {
        (0..n)
            .map(|i| {
                let user = &spec.users[i % spec.users.len()].user_id;
                let (prompt_text, side_info) = synthesize_prompt(spec.domain_tag, user, &glossary, rng);
                TaskInstance {
                    task_id: format!("{}-{}-{:05}", spec.domain_tag, name, i),
                    user_id: user.clone(),
                    domain_tag: spec.domain_tag,
                    prompt_text,
                    side_info,
                }
            })
            .collect()
    };
    let train = split("train", spec.train_tasks);
    let eval = split("eval", spec.eval_tasks);
    (train, eval)
}

fn synthesize_prompt(
    domain: DomainTag,
    user: &str,
    glossary: &[GlossaryEntry],
    rng: &mut RngStream,
) -> (String, BTreeMap<String, String>) {
    match domain {
        DomainTag::ReviewLength | DomainTag::ReviewLevel => {
            let media = MEDIA[rng.below(MEDIA.len())];
            let title = TITLES[rng.below(TITLES.len())];
            (format!("Write a review of the {media} \"{title}\" for {user}."), BTreeMap::new())
        }
        DomainTag::MathSolutions => {
            let a = 2 + rng.below(9);
            let b = 1 + rng.below(20);
            let problem = match rng.below(4) {
                0 => format!("Find the sum of the first {} positive odd integers.", a + b),
                1 => format!("Solve for x: {a}x + {b} = {}.", a * (b + 3) + b),
                2 => format!("In how many ways can {a} distinct books be arranged on a shelf?"),
                _ => format!("Compute the remainder when {a}^{b} is divided by 7."),
            };
            (format!("Write a worked solution for {user}: {problem}"), BTreeMap::new())
        }
        DomainTag::GlossaryTranslation => {
            let mut sources: Vec<usize> = (0..GLOSSARY_TABLE.len()).collect();
            rng.shuffle(&mut sources);
            let distinct = 1 + rng.below(3);
            let chosen = &sources[..distinct];
            let mut tokens: Vec<usize> = chosen.to_vec();
            for _ in 0..rng.below(3) {
                tokens.push(chosen[rng.below(distinct)]);
            }
            rng.shuffle(&mut tokens);
            let passage = tokens
                .iter()
                .map(|&t| GLOSSARY_TABLE[t].0)
                .collect::<Vec<_>>()
                .join(" ");
            let mut candidate_ids: Vec<usize> = chosen.iter().flat_map(|&t| [2 * t, 2 * t + 1]).collect();
            candidate_ids.sort_unstable();
            let lines: Vec<String> = candidate_ids
                .iter()
                .map(|&k| format!("{} → {}", glossary[k].source_token, glossary[k].target_token))
                .collect();
            let ids: Vec<&str> = candidate_ids.iter().map(|&k| glossary[k].entry_id.as_str()).collect();
            (
                format!(
                    "Translate into English for {user}: {passage}\nGlossary:\n{}",
                    lines.join("\n")
                ),
                BTreeMap::from([
                    (PASSAGE_KEY.to_string(), passage),
                    (GLOSSARY_CANDIDATES_KEY.to_string(), ids.join(",")),
                ]),
            )
        }
    }
}
