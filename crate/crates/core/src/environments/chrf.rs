//! Character n-gram F-score.
//!
//! Precision and recall are averaged uniformly over n-gram orders
//! `1..=max_ngram_order`; orders for which the reference has no n-grams are
//! left out of both averages. The score is
//! `100 · (1 + β²) · P · R / (β² · P + R)`.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::EnvError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChrfConfig {
    pub max_ngram_order: usize,
    pub beta: f64,
    pub whitespace_included: bool,
}

impl Default for ChrfConfig {
    fn default() -> Self {
        ChrfConfig {
            max_ngram_order: 6,
            beta: 2.0,
            whitespace_included: false,
        }
    }
}

impl ChrfConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        if self.max_ngram_order == 0 || !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(EnvError::InvalidChrfConfig(format!(
                "order {} beta {}",
                self.max_ngram_order, self.beta
            )));
        }
        Ok(())
    }
}

fn chars_of(text: &str, whitespace_included: bool) -> Vec<char> {
    text.chars()
        .filter(|c| whitespace_included || !c.is_whitespace())
        .collect()
}

fn ngram_counts(chars: &[char], n: usize) -> HashMap<&[char], usize> {
    let mut counts = HashMap::new();
    if chars.len() >= n {
        for w in chars.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Per-order `(matches, hypothesis n-grams, reference n-grams)`.
pub fn ngram_statistics(hypothesis: &str, reference: &str, config: &ChrfConfig) -> Vec<(usize, usize, usize)> {
    let hyp = chars_of(hypothesis, config.whitespace_included);
    let refc = chars_of(reference, config.whitespace_included);
    (1..=config.max_ngram_order)
        .map(|n| {
            let h = ngram_counts(&hyp, n);
            let r = ngram_counts(&refc, n);
            let matches = h
                .iter()
                .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
                .sum();
            (matches, hyp.len().saturating_sub(n - 1), refc.len().saturating_sub(n - 1))
        })
        .collect()
}

/// F-score from per-order counts (shared with the corpus-level helpers).
pub fn score_from_statistics(stats: &[(usize, usize, usize)], beta: f64) -> f64 {
    let mut precision = 0.0;
    let mut recall = 0.0;
    let mut orders = 0usize;
    for &(matches, hyp_total, ref_total) in stats {
        if ref_total == 0 {
            continue;
        }
        orders += 1;
        if hyp_total > 0 {
            precision += matches as f64 / hyp_total as f64;
        }
        recall += matches as f64 / ref_total as f64;
    }
    if orders == 0 {
        return 0.0;
    }
    let p = precision / orders as f64;
    let r = recall / orders as f64;
    if p + r == 0.0 {
        return 0.0;
    }
    let b2 = beta * beta;
    100.0 * (1.0 + b2) * p * r / (b2 * p + r)
}

/// chrF in `[0, 100]`.
pub fn chrf(hypothesis: &str, reference: &str, config: &ChrfConfig) -> Result<f64, EnvError> {
    config.validate()?;
    if chars_of(reference, config.whitespace_included).is_empty() {
        return Err(EnvError::EmptyReference);
    }
    Ok(score_from_statistics(
        &ngram_statistics(hypothesis, reference, config),
        config.beta,
    ))
}
