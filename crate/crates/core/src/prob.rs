//! Probability-vector primitives: softmax, KL and Jensen–Shannon divergence,
//! span normalization.
//!
//! Natural logarithms throughout, so `jsd` lies in `[0, ln 2]`. KL terms use
//! the convention `0 · ln 0 = 0`.

use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{self, Isa};

/// Tolerance on `Σ p = 1` when validating externally supplied vectors.
pub const SUM_TOLERANCE: f64 = 1e-6;

/// A dense probability distribution over the vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    /// Validates non-negativity and `Σ p = 1` within [`SUM_TOLERANCE`].
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::invalid("probability vector is empty"));
        }
        if let Some(i) = probs.iter().position(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::invalid(format!(
                "probability vector entry {i} is {} (must be finite and >= 0)",
                probs[i]
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::invalid(format!(
                "probability vector sums to {sum}, expected 1"
            )));
        }
        Ok(ProbVector(probs))
    }

    /// For freshly computed distributions whose invariants hold by construction.
    pub(crate) fn from_computed(probs: Vec<f64>) -> Self {
        debug_assert!(probs.iter().all(|p| *p >= 0.0));
        debug_assert!((probs.iter().sum::<f64>() - 1.0).abs() <= SUM_TOLERANCE);
        ProbVector(probs)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Index of the largest probability; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate().skip(1) {
            if p > self.0[best] {
                best = i;
            }
        }
        best
    }
}

impl Deref for ProbVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl<'de> Deserialize<'de> for ProbVector {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        ProbVector::new(v).map_err(serde::de::Error::custom)
    }
}

/// Pre-softmax scores. Stored in single precision, the width traces carry.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsVector(Vec<f32>);

impl LogitsVector {
    pub fn new(logits: Vec<f32>) -> Result<Self> {
        if logits.is_empty() {
            return Err(Error::invalid("logits vector is empty"));
        }
        if let Some(i) = logits.iter().position(|x| !x.is_finite()) {
            return Err(Error::invalid(format!(
                "logit {i} is not finite ({})",
                logits[i]
            )));
        }
        Ok(LogitsVector(logits))
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }

    pub fn softmax(&self, temperature: f64) -> Result<ProbVector> {
        softmax_impl(&self.0, temperature)
    }
}

/// Non-negative attention mass over a token-position span.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if let Some(i) = weights.iter().position(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid(format!(
                "weight {i} is {} (must be finite and >= 0)",
                weights[i]
            )));
        }
        Ok(WeightVector(weights))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Softmax of `logits / temperature`, stabilized by max-subtraction.
///
/// ```
/// let p = ptrmix::prob::softmax(&[2f64.ln(), 0.0], 1.0).unwrap();
/// assert!((p[0] - 2.0 / 3.0).abs() < 1e-12);
/// ```
pub fn softmax(logits: &[f64], temperature: f64) -> Result<ProbVector> {
    if let Some(i) = logits.iter().position(|x| !x.is_finite()) {
        return Err(Error::invalid(format!("logit {i} is not finite")));
    }
    softmax_impl(logits, temperature)
}

fn softmax_impl<T: kernels::Widen>(logits: &[T], temperature: f64) -> Result<ProbVector> {
    check_temperature(temperature)?;
    if logits.is_empty() {
        return Err(Error::invalid("logits vector is empty"));
    }
    let mut out = vec![0.0; logits.len()];
    kernels::softmax_into(Isa::detect(), logits, 1.0 / temperature, &mut out);
    Ok(ProbVector::from_computed(out))
}

pub(crate) fn check_temperature(temperature: f64) -> Result<()> {
    if temperature.is_finite() && temperature > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "temperature must be positive and finite, got {temperature}"
        )))
    }
}

/// `ln softmax(logits / temperature)`.
pub fn log_softmax(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    check_temperature(temperature)?;
    if logits.is_empty() {
        return Err(Error::invalid("logits vector is empty"));
    }
    if let Some(i) = logits.iter().position(|x| !x.is_finite()) {
        return Err(Error::invalid(format!("logit {i} is not finite")));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = logits.iter().map(|x| (x - max) / temperature).collect();
    let lse = shifted.iter().map(|y| y.exp()).sum::<f64>().ln();
    Ok(shifted.into_iter().map(|y| y - lse).collect())
}

fn check_lengths(p: &[f64], q: &[f64]) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::invalid(format!(
            "length mismatch: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    Ok(())
}

/// `Σ p_i ln(p_i / q_i)`.
pub fn kl_divergence(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    check_lengths(p, q)?;
    let mut total = 0.0;
    for (i, (&pi, &qi)) in p.iter().zip(q.iter()).enumerate() {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Err(Error::DivergenceUndefined { index: i });
        }
        total += pi * (pi / qi).ln();
    }
    Ok(total.max(0.0))
}

/// Jensen–Shannon divergence `½ KL(p‖m) + ½ KL(q‖m)`, `m = (p + q) / 2`.
pub fn jsd(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    check_lengths(p, q)?;
    Ok(jsd_slices(p, q))
}

/// Unchecked core of [`jsd`]. Exactly symmetric and exactly zero on equal
/// inputs; rounding excursions are clamped into `[0, ln 2]`.
pub(crate) fn jsd_slices(p: &[f64], q: &[f64]) -> f64 {
    let mut kl_p = 0.0;
    let mut kl_q = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        let m = 0.5 * (pi + qi);
        if pi > 0.0 {
            kl_p += pi * (pi / m).ln();
        }
        if qi > 0.0 {
            kl_q += qi * (qi / m).ln();
        }
    }
    (0.5 * kl_p + 0.5 * kl_q).clamp(0.0, std::f64::consts::LN_2)
}

/// Rescales a span of weights to sum to one.
pub fn normalize_span(weights: &WeightVector) -> Result<WeightVector> {
    let sum: f64 = weights.0.iter().sum();
    if !(sum > 0.0) {
        return Err(Error::DegenerateSpan);
    }
    Ok(WeightVector(weights.0.iter().map(|w| w / sum).collect()))
}
