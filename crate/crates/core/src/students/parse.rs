use serde::{Deserialize, Serialize};

use crate::types::ReadingLevel;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlossaryDirective {
    pub source: String,
    pub target: String,
    /// `true` for "use", `false` for "ignore".
    pub include: bool,
}

/// What a student understood from the advice text.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Directives {
    pub target_length: Option<u32>,
    pub target_level: Option<ReadingLevel>,
    pub questions: Option<bool>,
    pub multi_methods: Option<bool>,
    pub glossary: Vec<GlossaryDirective>,
}

impl Directives {
    pub fn is_empty(&self) -> bool {
        *self == Directives::default()
    }
}

fn first_integer_after_about(text: &str) -> Option<u32> {
    let lower = text.to_lowercase();
    let mut from = 0;
    while let Some(pos) = lower[from..].find("about") {
        let rest = lower[from + pos + "about".len()..].trim_start();
        let digits: String = rest.chars().take_while(char::is_ascii_digit).collect();
        if let Ok(n) = digits.parse() {
            return Some(n);
        }
        from += pos + "about".len();
    }
    None
}

fn negated(sentence: &str) -> bool {
    ["do not", "don't", "avoid", "never", "no questions"]
        .iter()
        .any(|p| sentence.contains(p))
}

/// Extract directives from free advice text. Total: text it does not
/// understand is ignored.
pub fn parse_advice(advice_text: &str) -> Directives {
    let mut d = Directives {
        target_length: first_integer_after_about(advice_text),
        target_level: ReadingLevel::find_in(advice_text),
        ..Directives::default()
    };
    for raw in advice_text.split(['.', '\n']) {
        let sentence = raw.trim();
        if sentence.is_empty() {
            continue;
        }
        let lower = sentence.to_lowercase();
        if d.questions.is_none() && lower.contains("question") {
            d.questions = Some(!negated(&lower));
        }
        if d.multi_methods.is_none() && lower.contains("method") {
            if ["multiple", "several", "more than one", "different"].iter().any(|p| lower.contains(p)) {
                d.multi_methods = Some(true);
            } else if ["single", "only one", "one method"].iter().any(|p| lower.contains(p)) {
                d.multi_methods = Some(false);
            }
        }
        for (prefix, include) in [("use the glossary entry:", true), ("ignore the glossary entry:", false)] {
            let matches = sentence
                .get(..prefix.len())
                .is_some_and(|p| p.eq_ignore_ascii_case(prefix));
            if let Some(rest) = matches.then(|| &sentence[prefix.len()..]) {
                let pair = rest.split_once('→').or_else(|| rest.split_once("->"));
                if let Some((src, tgt)) = pair {
                    let (src, tgt) = (src.trim(), tgt.trim());
                    if !src.is_empty() && !tgt.is_empty() {
                        d.glossary.push(GlossaryDirective {
                            source: src.to_string(),
                            target: tgt.to_string(),
                            include,
                        });
                    }
                }
            }
        }
    }
    d
}
