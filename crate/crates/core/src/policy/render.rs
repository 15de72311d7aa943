//! Advice templates and the deterministic action → text rendering.

use serde::{Deserialize, Serialize};

use super::{HeadKind, HeadSpec, PolicyError};
use crate::types::{GlossaryEntry, ReadingLevel};

/// Length-bucket centers in words: 25 buckets from 10 to 1000 with a
/// near-constant ratio of about 1.21 between neighbours.
pub const DEFAULT_LENGTH_BUCKETS: [u32; 25] = [
    10, 12, 15, 18, 22, 27, 32, 39, 48, 58, 71, 86, 104, 126, 153, 186, 226, 274, 333, 404, 491,
    606, 748, 865, 1000,
];

/// Sentence templates with a `{value}` slot. Boolean axes list the
/// `[false, true]` sentences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdviceTemplates {
    pub length: String,
    pub length_buckets: Vec<u32>,
    pub level: String,
    pub questions: [String; 2],
    pub multi_methods: [String; 2],
    pub glossary: [String; 2],
}

impl Default for AdviceTemplates {
    fn default() -> Self {
        AdviceTemplates {
            length: "Write the review in about {value} words.".into(),
            length_buckets: DEFAULT_LENGTH_BUCKETS.to_vec(),
            level: "Write for a {value} reading level.".into(),
            questions: [
                "Do not pose questions to the reader.".into(),
                "Make sure to pose questions to the reader.".into(),
            ],
            multi_methods: [
                "Present a single solution method.".into(),
                "Present multiple solution methods.".into(),
            ],
            glossary: [
                "Ignore the glossary entry: {value}.".into(),
                "Use the glossary entry: {value}.".into(),
            ],
        }
    }
}

impl AdviceTemplates {
    /// The full head set: length, reading level, the two math-solution
    /// flags and one include/ignore head per glossary entry.
    pub fn build_heads(&self, glossary: &[GlossaryEntry]) -> Vec<HeadSpec> {
        let mut heads = vec![
            HeadSpec {
                name: "length_bucket".into(),
                kind: HeadKind::LengthBucket,
                arity: self.length_buckets.len(),
                templates: vec![self.length.clone(); self.length_buckets.len()],
                values: self.length_buckets.iter().map(|b| b.to_string()).collect(),
            },
            HeadSpec {
                name: "reading_level".into(),
                kind: HeadKind::ReadingLevel,
                arity: ReadingLevel::ALL.len(),
                templates: vec![self.level.clone(); ReadingLevel::ALL.len()],
                values: ReadingLevel::ALL.iter().map(|l| l.phrase().to_string()).collect(),
            },
            boolean_head("include_questions", HeadKind::IncludeQuestions, &self.questions, ""),
            boolean_head(
                "include_multi_methods",
                HeadKind::IncludeMultiMethods,
                &self.multi_methods,
                "",
            ),
        ];
        for (k, entry) in glossary.iter().enumerate() {
            let value = format!("{} → {}", entry.source_token, entry.target_token);
            heads.push(boolean_head(
                &format!("glossary_include_{}", k + 1),
                HeadKind::GlossaryInclude {
                    entry_id: entry.entry_id.clone(),
                },
                &self.glossary,
                &value,
            ));
        }
        heads
    }
}

fn boolean_head(name: &str, kind: HeadKind, templates: &[String; 2], value: &str) -> HeadSpec {
    HeadSpec {
        name: name.into(),
        kind,
        arity: 2,
        templates: templates.to_vec(),
        values: vec![value.to_string(); 2],
    }
}

/// Render `(head index, choice)` pairs into one sentence per head, in the
/// given order.
pub fn render_advice(heads: &[HeadSpec], choices: &[(usize, usize)]) -> Result<String, PolicyError> {
    let mut sentences = Vec::with_capacity(choices.len());
    for &(h, idx) in choices {
        let head = heads
            .get(h)
            .ok_or_else(|| PolicyError::MissingTemplate(format!("head #{h}")))?;
        let template = head
            .templates
            .get(idx)
            .ok_or_else(|| PolicyError::MissingTemplate(format!("{}[{idx}]", head.name)))?;
        let value = head.values.get(idx).map(String::as_str).unwrap_or("");
        sentences.push(template.replace("{value}", value));
    }
    Ok(sentences.join(" "))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn heads() -> Vec<HeadSpec> {
        AdviceTemplates::default().build_heads(&[GlossaryEntry {
            entry_id: "g1".into(),
            source_token: "ka".into(),
            target_token: "water".into(),
        }])
    }

    #[test]
    fn length_bucket_sentence() {
        let heads = heads();
        let idx = DEFAULT_LENGTH_BUCKETS.iter().position(|&b| b == 104).unwrap();
        assert_eq!(
            render_advice(&heads, &[(0, idx)]).unwrap(),
            "Write the review in about 104 words."
        );
        let mut custom = AdviceTemplates::default();
        custom.length_buckets = vec![50, 100, 200];
        let h = custom.build_heads(&[]);
        assert_eq!(
            render_advice(&h, &[(0, 1)]).unwrap(),
            "Write the review in about 100 words."
        );
    }

    #[test]
    fn questions_sentence_mentions_the_reader() {
        let text = render_advice(&heads(), &[(2, 1)]).unwrap();
        assert!(text.contains("pose questions to the reader"));
    }

    #[test]
    fn glossary_sentence() {
        assert_eq!(
            render_advice(&heads(), &[(4, 1)]).unwrap(),
            "Use the glossary entry: ka → water."
        );
    }

    #[test]
    fn rendering_is_deterministic_and_ordered() {
        let h = heads();
        let a = render_advice(&h, &[(0, 3), (1, 4), (3, 0)]).unwrap();
        let b = render_advice(&h, &[(0, 3), (1, 4), (3, 0)]).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            a,
            "Write the review in about 18 words. Write for a college professor reading level. \
             Present a single solution method."
        );
    }

    #[test]
    fn missing_template_is_an_error() {
        let mut h = heads();
        h[1].templates.truncate(2);
        assert!(matches!(
            render_advice(&h, &[(1, 3)]),
            Err(PolicyError::MissingTemplate(_))
        ));
    }

    #[test]
    fn grid_spans_range_with_small_ratio() {
        assert_eq!(DEFAULT_LENGTH_BUCKETS.len(), 25);
        assert_eq!(DEFAULT_LENGTH_BUCKETS[0], 10);
        assert_eq!(DEFAULT_LENGTH_BUCKETS[24], 1000);
        for w in DEFAULT_LENGTH_BUCKETS.windows(2) {
            let r = f64::from(w[1]) / f64::from(w[0]);
            assert!((1.15..1.26).contains(&r), "{w:?}");
        }
    }
}
