//! Generation and teacher-forced scoring over a [`Session`].

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::Session;
use crate::engine::{PigConfig, StepDecoder};
use crate::error::{Error, Result};
use crate::prob::ProbVector;
use crate::TokenId;

pub const DEFAULT_SAMPLING_TEMPERATURE: f64 = 0.8;
pub const DEFAULT_MAX_NEW_TOKENS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    /// Argmax of the mixed distribution, lowest token id on ties.
    Greedy,
    /// One uniform draw per step against the cumulative distribution in
    /// token-id order.
    Sample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub mode: SamplingMode,
    /// Temperature of the vocabulary distribution during generation. Replaces
    /// the config temperature for the duration of [`generate`].
    pub temperature: f64,
    pub max_new_tokens: usize,
    #[serde(default)]
    pub stop_tokens: BTreeSet<TokenId>,
    pub seed: u64,
}

impl Default for SamplingParams {
    fn default() -> Self {
        SamplingParams {
            mode: SamplingMode::Sample,
            temperature: DEFAULT_SAMPLING_TEMPERATURE,
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
            stop_tokens: BTreeSet::new(),
            seed: 0,
        }
    }
}

impl SamplingParams {
    pub fn greedy() -> Self {
        SamplingParams {
            mode: SamplingMode::Greedy,
            ..Self::default()
        }
    }

    pub fn with_max_new_tokens(mut self, n: usize) -> Self {
        self.max_new_tokens = n;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_new_tokens == 0 {
            return Err(Error::invalid("max_new_tokens must be at least 1"));
        }
        crate::prob::check_temperature(self.temperature)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    StopToken,
    Length,
    EndOfTrace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    /// Generated ids, including a terminating stop token if one was drawn.
    pub tokens: Vec<TokenId>,
    pub copy_probabilities: Vec<f64>,
    /// Mixed-distribution probability of each generated token.
    pub chosen_probabilities: Vec<f64>,
    pub stop_reason: StopReason,
}

/// Index of the first token whose cumulative probability exceeds `u`.
fn inverse_cdf(probs: &ProbVector, u: f64) -> usize {
    let mut cumulative = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            cumulative += p;
            last_positive = i;
            if u < cumulative {
                return i;
            }
        }
    }
    // Rounding left the total just below u.
    last_positive
}

/// Free-running generation: `next_step → decode → choose → advance` until a
/// stop token, the length limit or the end of the session's steps.
pub fn generate<S: Session>(
    mut session: S,
    config: &PigConfig,
    params: &SamplingParams,
) -> Result<GenerationResult> {
    params.validate()?;
    let config = PigConfig {
        temperature: params.temperature,
        ..config.clone()
    };
    config.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut decoder = StepDecoder::new();
    let mut result = GenerationResult {
        tokens: Vec::new(),
        copy_probabilities: Vec::new(),
        chosen_probabilities: Vec::new(),
        stop_reason: StopReason::Length,
    };

    for step in 0..params.max_new_tokens {
        let trace = match session.next_step(None) {
            Ok(t) => t,
            Err(Error::EndOfTrace { .. }) => {
                result.stop_reason = StopReason::EndOfTrace;
                return Ok(result);
            }
            Err(e) => return Err(e.at_step(step)),
        };
        let (probs, diag) = decoder.decode(&trace, &config).map_err(|e| e.at_step(step))?;
        let token = match params.mode {
            SamplingMode::Greedy => probs.argmax(),
            SamplingMode::Sample => inverse_cdf(&probs, rng.random::<f64>()),
        };
        session
            .advance(token as TokenId)
            .map_err(|e| e.at_step(step))?;
        result.tokens.push(token as TokenId);
        result.copy_probabilities.push(diag.copy_probability);
        result.chosen_probabilities.push(probs[token]);
        if params.stop_tokens.contains(&(token as TokenId)) {
            result.stop_reason = StopReason::StopToken;
            return Ok(result);
        }
    }
    Ok(result)
}

/// Teacher-forced log-probability of a candidate continuation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceScore {
    /// `Σ_t ln P(candidate_t | prefix)`; 0 for an empty candidate.
    pub total: f64,
    pub per_token: Vec<f64>,
    pub copy_probabilities: Vec<f64>,
}

impl SequenceScore {
    /// Per-token average; 0 for an empty candidate.
    pub fn mean(&self) -> f64 {
        if self.per_token.is_empty() {
            0.0
        } else {
            self.total / self.per_token.len() as f64
        }
    }
}

/// Scores `candidate` under the mixed distribution at the config temperature.
pub fn score_sequence<S: Session>(
    mut session: S,
    candidate: &[TokenId],
    config: &PigConfig,
) -> Result<SequenceScore> {
    config.validate()?;
    for &t in candidate {
        session.info().check_token(t)?;
    }
    let mut decoder = StepDecoder::new();
    let mut score = SequenceScore {
        total: 0.0,
        per_token: Vec::with_capacity(candidate.len()),
        copy_probabilities: Vec::with_capacity(candidate.len()),
    };
    for (step, &token) in candidate.iter().enumerate() {
        let trace = session
            .next_step(Some(token))
            .map_err(|e| e.at_step(step))?;
        let (probs, diag) = decoder.decode(&trace, config).map_err(|e| e.at_step(step))?;
        let lp = probs[token as usize].ln();
        score.total += lp;
        score.per_token.push(lp);
        score.copy_probabilities.push(diag.copy_probability);
    }
    Ok(score)
}
