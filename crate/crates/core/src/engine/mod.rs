//! The pointer-generator step transform.
//!
//! One step turns per-layer logits and an attention row into
//!
//! ```text
//! P(v) = p_cp · P_source(v) + (1 − p_cp) · P_vocab(v)
//! ```
//!
//! where `P_source` is the span-normalized attention scattered onto the
//! vocabulary, `P_vocab` the anchor-layer softmax, and `p_cp` the scaled,
//! clipped aggregate of Jensen–Shannon divergences between the anchor layer
//! and each candidate layer.

mod config;
mod step;

use std::collections::BTreeSet;
use std::f64::consts::LN_2;

use serde::Serialize;

pub use config::{Aggregator, LayerSelector, Parity, PigConfig, DEFAULT_ALPHA, DEFAULT_CLIP_MAX};
pub use step::{AttentionRow, SourceSpan, StepTrace};

use crate::error::{Error, Result};
use crate::kernels::{self, Isa};
use crate::prob::{self, ProbVector};
use crate::TokenId;

/// Per-step by-products of [`decode_step`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepDiagnostics {
    pub copy_probability: f64,
    /// Aggregated divergence before scaling and clipping. Zero when copying
    /// is disabled (`alpha = 0`), in which case no divergences are computed.
    pub raw_divergence: f64,
    /// `(layer, jsd(anchor, layer))` for each candidate layer.
    pub layer_divergence: Vec<(usize, f64)>,
    /// Non-zero pointer mass per token id, ascending by id.
    pub source_mass: Vec<(TokenId, f64)>,
    /// Set when the span carried no usable attention mass; `p_cp` was forced
    /// to zero.
    pub degenerate_span: bool,
}

/// Element-wise mean of per-head attention rows.
pub fn aggregate_heads(per_head: &[AttentionRow]) -> Result<AttentionRow> {
    let first = per_head
        .first()
        .ok_or_else(|| Error::invalid("no attention heads to aggregate"))?;
    let len = first.len();
    if let Some(i) = per_head.iter().position(|r| r.len() != len) {
        return Err(Error::invalid(format!(
            "head {i} has {} attention weights, head 0 has {len}",
            per_head[i].len()
        )));
    }
    let mut acc = vec![0.0; len];
    for row in per_head {
        for (a, w) in acc.iter_mut().zip(row.as_slice()) {
            *a += w;
        }
    }
    let n = per_head.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    AttentionRow::new(acc)
}

/// Pointer mass per vocabulary token: span attention with filtered tokens
/// dropped, normalized, then accumulated by token id.
fn source_mass(
    trace: &StepTrace,
    filter: &BTreeSet<TokenId>,
    vocab_size: usize,
) -> Result<Vec<(TokenId, f64)>> {
    let span = trace.source_span();
    let tokens = &trace.context_tokens()[span.range()];
    let weights = &trace.attention().as_slice()[span.range()];

    let kept: Vec<(TokenId, f64)> = tokens
        .iter()
        .zip(weights)
        .filter(|(t, _)| !filter.contains(t))
        .map(|(&t, &w)| (t, w))
        .collect();
    if let Some((t, _)) = kept.iter().find(|(t, _)| *t as usize >= vocab_size) {
        return Err(Error::invalid(format!(
            "span token {t} outside vocabulary of {vocab_size}"
        )));
    }
    let total: f64 = kept.iter().map(|(_, w)| w).sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateSpan);
    }

    // Stable sort keeps span order within a token, so sums are reproducible.
    let mut kept = kept;
    kept.sort_by_key(|&(t, _)| t);
    let mut mass: Vec<(TokenId, f64)> = Vec::with_capacity(kept.len());
    for (t, w) in kept {
        match mass.last_mut() {
            Some((last, m)) if *last == t => *m += w / total,
            _ => mass.push((t, w / total)),
        }
    }
    mass.retain(|(_, m)| *m > 0.0);
    Ok(mass)
}

/// Dense pointer distribution over the vocabulary.
pub fn pointer_distribution(
    trace: &StepTrace,
    filter: Option<&BTreeSet<TokenId>>,
) -> Result<ProbVector> {
    let empty = BTreeSet::new();
    let vocab_size = trace.vocab_size();
    let mass = source_mass(trace, filter.unwrap_or(&empty), vocab_size)?;
    let mut dense = vec![0.0; vocab_size];
    for (t, m) in mass {
        dense[t as usize] = m;
    }
    Ok(ProbVector::from_computed(dense))
}

/// Copy probability from explicit anchor and candidate distributions.
pub fn copy_probability(
    anchor: &ProbVector,
    candidates: &[ProbVector],
    config: &PigConfig,
) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::invalid("no candidate distributions"));
    }
    let divs = candidates
        .iter()
        .map(|c| prob::jsd(anchor, c))
        .collect::<Result<Vec<_>>>()?;
    config.copy_probability_from(&divs)
}

/// `p_cp · source + (1 − p_cp) · vocab`.
pub fn mix_distributions(p_cp: f64, source: &ProbVector, vocab: &ProbVector) -> Result<ProbVector> {
    if !(0.0..=1.0).contains(&p_cp) {
        return Err(Error::invalid(format!("copy probability {p_cp} outside [0, 1]")));
    }
    if source.len() != vocab.len() {
        return Err(Error::invalid(format!(
            "length mismatch: source {} vs vocab {}",
            source.len(),
            vocab.len()
        )));
    }
    let mixed = source
        .iter()
        .zip(vocab.iter())
        .map(|(s, v)| p_cp * s + (1.0 - p_cp) * v)
        .collect();
    Ok(ProbVector::from_computed(mixed))
}

/// One decode step with fresh scratch space. Loops should hold a
/// [`StepDecoder`] instead.
pub fn decode_step(trace: &StepTrace, config: &PigConfig) -> Result<(ProbVector, StepDiagnostics)> {
    StepDecoder::new().decode(trace, config)
}

/// Reusable decode-step evaluator. Owns the vocabulary-sized scratch
/// buffers so repeated steps do not reallocate them.
#[derive(Debug)]
pub struct StepDecoder {
    isa: Isa,
    anchor: Vec<f64>,
    candidate: Vec<f64>,
    vocab: Vec<f64>,
}

impl Default for StepDecoder {
    fn default() -> Self {
        Self::new()
    }
}

impl StepDecoder {
    pub fn new() -> Self {
        Self::with_isa(Isa::detect())
    }

    pub fn with_isa(isa: Isa) -> Self {
        StepDecoder {
            isa,
            anchor: Vec::new(),
            candidate: Vec::new(),
            vocab: Vec::new(),
        }
    }

    pub fn decode(
        &mut self,
        trace: &StepTrace,
        config: &PigConfig,
    ) -> Result<(ProbVector, StepDiagnostics)> {
        config.validate()?;
        let vocab_size = trace.vocab_size();
        let anchor_logits = trace.logits(config.anchor_layer)?.as_slice();
        let candidates = config
            .layer_set
            .iter()
            .map(|&l| trace.logits(l).map(|x| (l, x.as_slice())))
            .collect::<Result<Vec<_>>>()?;

        self.anchor.resize(vocab_size, 0.0);
        let copying = config.alpha > 0.0;

        let mut layer_divergence = Vec::with_capacity(candidates.len());
        let mut raw_divergence = 0.0;
        let mut copy_probability = 0.0;
        if copying {
            self.candidate.resize(vocab_size, 0.0);
            let anchor_negent = kernels::softmax_into(self.isa, anchor_logits, 1.0, &mut self.anchor);
            let hint = kernels::max_value(self.isa, anchor_logits);
            for &(layer, logits) in &candidates {
                let d = if logits == anchor_logits {
                    0.0
                } else {
                    self.divergence_from_anchor(anchor_negent, hint, logits)
                };
                layer_divergence.push((layer, d));
            }
            let divs: Vec<f64> = layer_divergence.iter().map(|(_, d)| *d).collect();
            raw_divergence = config.aggregator.apply(&divs).unwrap_or(0.0);
            copy_probability = config.copy_probability_from(&divs)?;
        }

        let (source_mass, degenerate_span) =
            match source_mass(trace, &config.token_filter, vocab_size) {
                Ok(m) => (m, false),
                Err(Error::DegenerateSpan) => (Vec::new(), true),
                Err(e) => return Err(e),
            };
        if degenerate_span {
            copy_probability = 0.0;
        }

        let vocab: &[f64] = if copying && config.temperature == 1.0 {
            &self.anchor
        } else {
            self.vocab.resize(vocab_size, 0.0);
            kernels::softmax_into(
                self.isa,
                anchor_logits,
                1.0 / config.temperature,
                &mut self.vocab,
            );
            &self.vocab
        };

        let out = if copy_probability == 0.0 {
            vocab.to_vec()
        } else {
            let keep = 1.0 - copy_probability;
            let mut out: Vec<f64> = vocab.iter().map(|v| keep * v).collect();
            for &(t, m) in &source_mass {
                let t = t as usize;
                out[t] = copy_probability * m + keep * vocab[t];
            }
            out
        };

        Ok((
            ProbVector::from_computed(out),
            StepDiagnostics {
                copy_probability,
                raw_divergence,
                layer_divergence,
                source_mass,
                degenerate_span,
            },
        ))
    }

    /// JSD between the anchor distribution (already in `self.anchor`, with
    /// negative entropy `anchor_negent`) and `softmax(logits)`, through
    /// `JSD = ½ Σ p ln p + ½ Σ q ln q − Σ m ln m`.
    fn divergence_from_anchor(&mut self, anchor_negent: f64, hint: f64, logits: &[f32]) -> f64 {
        let (sum, dot) = kernels::exp_hinted(self.isa, logits, hint, &mut self.candidate);
        let inv = 1.0 / sum;
        let cand_negent = dot * inv - sum.ln();
        let mid = kernels::midpoint_entropy(self.isa, &self.anchor, &self.candidate, inv);
        (0.5 * anchor_negent + 0.5 * cand_negent - mid).clamp(0.0, LN_2)
    }
}
