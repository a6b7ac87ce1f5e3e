use serde::{Deserialize, Serialize};

use super::dataset::{Candidate, FactorItem};
use crate::error::{Error, Result};

/// Log-probabilities of one item's completions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorScores {
    pub correct_index: usize,
    pub scores: Vec<f64>,
}

impl FactorScores {
    pub fn score_item(
        item: &FactorItem,
        scorer: impl FnMut(&Candidate) -> Result<f64>,
    ) -> Result<Self> {
        Ok(FactorScores {
            correct_index: item.correct_index,
            scores: item.completions.iter().map(scorer).collect::<Result<_>>()?,
        })
    }

    /// Correct completion strictly above every distractor.
    pub fn is_correct(&self) -> bool {
        let c = self.scores[self.correct_index];
        self.scores
            .iter()
            .enumerate()
            .all(|(i, &s)| i == self.correct_index || c > s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorResult {
    pub accuracy: f64,
    pub correct: Vec<bool>,
}

pub fn factor_accuracy(scores: &[FactorScores]) -> Result<FactorResult> {
    if scores.is_empty() {
        return Err(Error::invalid("FACTOR dataset is empty"));
    }
    if let Some(i) = scores
        .iter()
        .position(|s| s.scores.len() < 2 || s.correct_index >= s.scores.len())
    {
        return Err(Error::invalid(format!(
            "item {i}: need at least two completions and a valid correct index"
        )));
    }
    let correct: Vec<bool> = scores.iter().map(FactorScores::is_correct).collect();
    let accuracy = correct.iter().filter(|c| **c).count() as f64 / correct.len() as f64;
    Ok(FactorResult { accuracy, correct })
}
