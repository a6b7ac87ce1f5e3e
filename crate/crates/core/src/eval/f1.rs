//! SQuAD-style answer normalization, token F1 and exact match.

use std::collections::HashMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

/// Normalization steps, applied in the order listed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Normalization {
    pub lowercase: bool,
    pub strip_punctuation: bool,
    pub strip_articles: bool,
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            lowercase: true,
            strip_punctuation: true,
            strip_articles: true,
        }
    }
}

fn articles() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\b(a|an|the)\b").expect("valid regex"))
}

/// Normalized answer tokens.
pub fn normalize_answer(text: &str, norm: Normalization) -> Vec<String> {
    let mut s = if norm.lowercase {
        text.to_lowercase()
    } else {
        text.to_string()
    };
    if norm.strip_punctuation {
        s.retain(|c| !c.is_ascii_punctuation());
    }
    if norm.strip_articles {
        s = articles().replace_all(&s, " ").into_owned();
    }
    s.split_whitespace().map(str::to_string).collect()
}

/// Token-bag F1 between one prediction and one gold answer.
pub fn token_f1(prediction: &str, gold: &str, norm: Normalization) -> f64 {
    let pred = normalize_answer(prediction, norm);
    let gold = normalize_answer(gold, norm);
    if pred.is_empty() || gold.is_empty() {
        return if pred.is_empty() && gold.is_empty() { 1.0 } else { 0.0 };
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &gold {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in &pred {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / pred.len() as f64;
    let recall = common as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Best F1 over the gold answers; 0 when there are none.
pub fn squad_f1(prediction: &str, golds: &[String]) -> f64 {
    squad_f1_with(prediction, golds, Normalization::default())
}

pub fn squad_f1_with(prediction: &str, golds: &[String], norm: Normalization) -> f64 {
    golds
        .iter()
        .map(|g| token_f1(prediction, g, norm))
        .fold(0.0, f64::max)
}

/// 1 when the normalized prediction equals some normalized gold answer.
pub fn exact_match(prediction: &str, golds: &[String]) -> f64 {
    let norm = Normalization::default();
    let pred = normalize_answer(prediction, norm);
    if golds.iter().any(|g| normalize_answer(g, norm) == pred) {
        1.0
    } else {
        0.0
    }
}
