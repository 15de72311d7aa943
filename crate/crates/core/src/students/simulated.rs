use rand_distr::{Distribution, Normal};

use super::{measure_text, parse_advice, Student, StudentError, StudentResponse, StudentSpec};
use crate::environments::PASSAGE_KEY;
use crate::rng::RngStream;
use crate::types::{DomainTag, ReadingLevel, TaskInstance};

const FILLER: [&str; 24] = [
    "the", "story", "unfolds", "with", "steady", "care", "and", "every", "scene", "adds",
    "warmth", "to", "its", "quiet", "ending", "while", "the", "characters", "grow", "in",
    "small", "honest", "ways", "overall",
];
const QUESTION_MARKER: &str = "What do you think?";
const METHODS_MARKER: &str = "Alternatively, another method works too.";

/// Rule-following student: parses advice and obeys each directive
/// independently with probability `compliance`.
///
/// Randomness is split into labelled sub-streams (`compliance`,
/// `length-noise`, `correctness`, `text`) so that, for a fixed stream,
/// whether a math answer is correct never depends on the advice.
#[derive(Debug, Clone)]
pub struct SimulatedStudent {
    spec: StudentSpec,
}

struct Baseline {
    length: u32,
    level: ReadingLevel,
    level_declared: bool,
    questions: bool,
    multi_methods: bool,
    translation: Option<Vec<String>>,
}

impl SimulatedStudent {
    pub fn new(spec: StudentSpec) -> Self {
        SimulatedStudent { spec }
    }

    fn baseline(&self, task: &TaskInstance, attempt: Option<&StudentResponse>) -> Baseline {
        match attempt {
            Some(a) => Baseline {
                length: a.measured.word_count.max(1),
                level: a.measured.declared_level.unwrap_or(self.spec.default_level),
                level_declared: a.measured.declared_level.is_some(),
                questions: a.measured.has_questions,
                multi_methods: a.measured.has_multi_methods,
                translation: a
                    .measured
                    .translation
                    .as_ref()
                    .map(|t| t.split_whitespace().map(str::to_string).collect()),
            },
            None => Baseline {
                length: self.spec.default_length,
                level: self.spec.default_level,
                level_declared: task.domain_tag == DomainTag::ReviewLevel,
                questions: self.spec.default_questions,
                multi_methods: self.spec.default_multi_methods,
                translation: None,
            },
        }
    }

    fn noisy_length(&self, target: u32, rng: &mut RngStream) -> u32 {
        let sigma = self.spec.length_noise_sigma;
        let eps = if sigma > 0.0 {
            Normal::new(0.0, sigma).map(|n| n.sample(rng)).unwrap_or(0.0)
        } else {
            0.0
        };
        (f64::from(target) * (1.0 + eps)).round().max(1.0) as u32
    }
}

impl Student for SimulatedStudent {
    fn spec(&self) -> &StudentSpec {
        &self.spec
    }

    fn respond(
        &self,
        task: &TaskInstance,
        advice: Option<&str>,
        attempt: Option<&StudentResponse>,
        rng: &RngStream,
    ) -> Result<StudentResponse, StudentError> {
        let directives = advice.map(parse_advice).unwrap_or_default();
        let base = self.baseline(task, attempt);
        let mut comply = rng.derive("compliance");
        let mut noise = rng.derive("length-noise");
        let c = self.spec.compliance;

        let length = match directives.target_length {
            Some(t) if comply.bernoulli(c) => self.noisy_length(t, &mut noise),
            _ => base.length,
        };
        let (level, level_declared) = match directives.target_level {
            Some(l) if comply.bernoulli(c) => (l, true),
            _ => (base.level, base.level_declared),
        };
        let questions = match directives.questions {
            Some(q) if comply.bernoulli(c) => q,
            _ => base.questions,
        };
        let multi_methods = match directives.multi_methods {
            Some(m) if comply.bernoulli(c) => m,
            _ => base.multi_methods,
        };
        let mut lexicon: Vec<(String, String)> = Vec::new();
        for g in &directives.glossary {
            if comply.bernoulli(c) && g.include && !lexicon.iter().any(|(s, _)| s == &g.source) {
                lexicon.push((g.source.clone(), g.target.clone()));
            }
        }

        let text = if task.domain_tag == DomainTag::GlossaryTranslation {
            let passage: Vec<&str> = task
                .side_info
                .get(PASSAGE_KEY)
                .map(|p| p.split_whitespace().collect())
                .unwrap_or_default();
            passage
                .iter()
                .enumerate()
                .map(|(i, tok)| {
                    lexicon
                        .iter()
                        .find(|(s, _)| s == tok)
                        .map(|(_, t)| t.clone())
                        .or_else(|| base.translation.as_ref().and_then(|t| t.get(i).cloned()))
                        .unwrap_or_else(|| tok.to_string())
                })
                .collect::<Vec<_>>()
                .join(" ")
        } else {
            let mut words: Vec<&str> = Vec::with_capacity(length as usize + 16);
            let level_marker;
            if level_declared {
                level_marker = format!("Reading level: {}.", level.phrase());
                words.extend(level_marker.split_whitespace());
            }
            if questions {
                words.extend(QUESTION_MARKER.split_whitespace());
            }
            if multi_methods {
                words.extend(METHODS_MARKER.split_whitespace());
            }
            let offset = rng.derive("text").below(FILLER.len());
            let fill = (length as usize).saturating_sub(words.len());
            words.extend((0..fill).map(|i| FILLER[(offset + i) % FILLER.len()]));
            words.join(" ")
        };

        let mut measured = measure_text(&text, task.domain_tag);
        if task.domain_tag == DomainTag::MathSolutions {
            let mut correctness = rng.derive("correctness");
            measured.is_correct = Some(correctness.bernoulli(self.spec.base_correctness));
        }
        Ok(StudentResponse { text, measured })
    }
}
