use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prob::LogitsVector;
use crate::TokenId;

/// Half-open, zero-based token range `[start, end)` of the source document
/// inside the prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[usize; 2]", into = "[usize; 2]")]
pub struct SourceSpan {
    start: usize,
    end: usize,
}

impl SourceSpan {
    pub fn new(start: usize, end: usize) -> Result<Self> {
        if start >= end {
            return Err(Error::invalid(format!(
                "source span [{start}, {end}) is empty or reversed"
            )));
        }
        Ok(SourceSpan { start, end })
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn end(&self) -> usize {
        self.end
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }

    pub fn check_within(&self, prompt_len: usize) -> Result<()> {
        if self.end > prompt_len {
            return Err(Error::invalid(format!(
                "source span [{}, {}) exceeds prompt length {prompt_len}",
                self.start, self.end
            )));
        }
        Ok(())
    }
}

impl TryFrom<[usize; 2]> for SourceSpan {
    type Error = Error;

    fn try_from(v: [usize; 2]) -> Result<Self> {
        SourceSpan::new(v[0], v[1])
    }
}

impl From<SourceSpan> for [usize; 2] {
    fn from(s: SourceSpan) -> Self {
        [s.start, s.end]
    }
}

/// Head-averaged attention from the last position over the whole context.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRow(Vec<f64>);

impl AttentionRow {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if let Some(i) = weights.iter().position(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid(format!(
                "attention weight {i} is {} (must be finite and >= 0)",
                weights[i]
            )));
        }
        Ok(AttentionRow(weights))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Everything one decode step consumes: per-layer logits at the last
/// position and the attention row over the current context.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    context_tokens: Vec<TokenId>,
    source_span: SourceSpan,
    layer_logits: BTreeMap<usize, LogitsVector>,
    attention: AttentionRow,
}

impl StepTrace {
    pub fn new(
        context_tokens: Vec<TokenId>,
        source_span: SourceSpan,
        layer_logits: BTreeMap<usize, LogitsVector>,
        attention: AttentionRow,
    ) -> Result<Self> {
        source_span.check_within(context_tokens.len())?;
        if attention.len() != context_tokens.len() {
            return Err(Error::invalid(format!(
                "attention row has {} entries for a context of {} tokens",
                attention.len(),
                context_tokens.len()
            )));
        }
        let mut sizes = layer_logits.values().map(LogitsVector::len);
        let vocab = sizes
            .next()
            .ok_or_else(|| Error::invalid("step trace carries no layer logits"))?;
        if let Some((layer, l)) = layer_logits.iter().find(|(_, l)| l.len() != vocab) {
            return Err(Error::invalid(format!(
                "layer {layer} has {} logits, expected vocab size {vocab}",
                l.len()
            )));
        }
        Ok(StepTrace {
            context_tokens,
            source_span,
            layer_logits,
            attention,
        })
    }

    pub fn context_tokens(&self) -> &[TokenId] {
        &self.context_tokens
    }

    pub fn source_span(&self) -> SourceSpan {
        self.source_span
    }

    pub fn layer_logits(&self) -> &BTreeMap<usize, LogitsVector> {
        &self.layer_logits
    }

    pub fn logits(&self, layer: usize) -> Result<&LogitsVector> {
        self.layer_logits
            .get(&layer)
            .ok_or_else(|| Error::invalid(format!("layer {layer} missing from step trace")))
    }

    pub fn attention(&self) -> &AttentionRow {
        &self.attention
    }

    pub fn vocab_size(&self) -> usize {
        self.layer_logits
            .values()
            .next()
            .map(LogitsVector::len)
            .unwrap_or(0)
    }

    pub fn into_parts(
        self,
    ) -> (
        Vec<TokenId>,
        SourceSpan,
        BTreeMap<usize, LogitsVector>,
        AttentionRow,
    ) {
        (
            self.context_tokens,
            self.source_span,
            self.layer_logits,
            self.attention,
        )
    }
}
