use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::TokenId;

/// How per-layer divergences are folded into one copy score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregator {
    Mean,
    Max,
    Min,
}

impl Aggregator {
    pub fn apply(self, values: &[f64]) -> Option<f64> {
        if values.is_empty() {
            return None;
        }
        Some(match self {
            Aggregator::Mean => values.iter().sum::<f64>() / values.len() as f64,
            Aggregator::Max => values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            Aggregator::Min => values.iter().copied().fold(f64::INFINITY, f64::min),
        })
    }
}

impl FromStr for Aggregator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mean" | "avg" => Ok(Aggregator::Mean),
            "max" => Ok(Aggregator::Max),
            "min" => Ok(Aggregator::Min),
            other => Err(Error::invalid(format!(
                "unknown aggregator `{other}` (expected mean, max or min)"
            ))),
        }
    }
}

impl fmt::Display for Aggregator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregator::Mean => "mean",
            Aggregator::Max => "max",
            Aggregator::Min => "min",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parity {
    Even,
    Odd,
}

/// Candidate-layer selection, resolved against the anchor layer.
///
/// Textual forms: `last16`, `last16:even`, `last8:odd`, or an explicit
/// comma-separated list such as `24,26,28`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSelector {
    Explicit(Vec<usize>),
    /// The `count` layers directly below the anchor, optionally thinned to one
    /// parity of absolute layer index.
    Last {
        count: usize,
        parity: Option<Parity>,
    },
}

impl LayerSelector {
    pub fn resolve(&self, anchor: usize) -> Result<Vec<usize>> {
        let layers: Vec<usize> = match self {
            LayerSelector::Explicit(list) => {
                if list.contains(&anchor) {
                    return Err(Error::invalid(format!(
                        "layer set contains the anchor layer {anchor}"
                    )));
                }
                let set: BTreeSet<usize> = list.iter().copied().collect();
                set.into_iter().collect()
            }
            LayerSelector::Last { count, parity } => {
                let lo = anchor.saturating_sub(*count);
                (lo..anchor)
                    .filter(|l| match parity {
                        None => true,
                        Some(Parity::Even) => l % 2 == 0,
                        Some(Parity::Odd) => l % 2 == 1,
                    })
                    .collect()
            }
        };
        if layers.is_empty() {
            return Err(Error::invalid(format!(
                "layer selector `{self}` selects no layers below anchor {anchor}"
            )));
        }
        Ok(layers)
    }
}

impl FromStr for LayerSelector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(rest) = s.strip_prefix("last") {
            let (count, parity) = match rest.split_once(':') {
                Some((n, "even")) => (n, Some(Parity::Even)),
                Some((n, "odd")) => (n, Some(Parity::Odd)),
                Some((_, p)) => {
                    return Err(Error::invalid(format!(
                        "unknown layer parity `{p}` (expected even or odd)"
                    )))
                }
                None => (rest, None),
            };
            let count: usize = count
                .parse()
                .map_err(|_| Error::invalid(format!("bad layer count in `{s}`")))?;
            if count == 0 {
                return Err(Error::invalid("layer count must be at least 1"));
            }
            return Ok(LayerSelector::Last { count, parity });
        }
        let list = s
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::invalid(format!("bad layer index `{t}` in `{s}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LayerSelector::Explicit(list))
    }
}

impl fmt::Display for LayerSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSelector::Explicit(list) => {
                let parts: Vec<String> = list.iter().map(|l| l.to_string()).collect();
                f.write_str(&parts.join(","))
            }
            LayerSelector::Last { count, parity } => {
                write!(f, "last{count}")?;
                match parity {
                    Some(Parity::Even) => f.write_str(":even"),
                    Some(Parity::Odd) => f.write_str(":odd"),
                    None => Ok(()),
                }
            }
        }
    }
}

impl Serialize for LayerSelector {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LayerSelector {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub const DEFAULT_ALPHA: f64 = 500.0;
pub const DEFAULT_CLIP_MAX: f64 = 0.5;

/// Hyperparameters of one pointer-generator decode step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PigConfig {
    /// Scale applied to the aggregated divergence. Zero disables copying.
    pub alpha: f64,
    /// Ceiling on the copy probability.
    pub clip_max: f64,
    pub aggregator: Aggregator,
    /// Candidate layers compared against the anchor.
    pub layer_set: Vec<usize>,
    pub anchor_layer: usize,
    /// Layer the attention row was taken from.
    pub attention_layer: usize,
    /// Token ids that never receive pointer mass.
    #[serde(default)]
    pub token_filter: BTreeSet<TokenId>,
    /// Temperature of the vocabulary distribution. Layer distributions used
    /// for the divergence are always taken at temperature 1.
    pub temperature: f64,
    pub seed: u64,
}

impl PigConfig {
    /// Defaults: α = 500, clip 0.5, max aggregation, attention from the
    /// anchor layer, temperature 1.
    pub fn new(anchor_layer: usize, layer_set: Vec<usize>) -> Self {
        PigConfig {
            alpha: DEFAULT_ALPHA,
            clip_max: DEFAULT_CLIP_MAX,
            aggregator: Aggregator::Max,
            layer_set,
            anchor_layer,
            attention_layer: anchor_layer,
            token_filter: BTreeSet::new(),
            temperature: 1.0,
            seed: 0,
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_aggregator(mut self, aggregator: Aggregator) -> Self {
        self.aggregator = aggregator;
        self
    }

    pub fn with_clip_max(mut self, clip_max: f64) -> Self {
        self.clip_max = clip_max;
        self
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::invalid(format!(
                "alpha must be finite and >= 0, got {}",
                self.alpha
            )));
        }
        if !(self.clip_max > 0.0 && self.clip_max <= 1.0) {
            return Err(Error::invalid(format!(
                "clip_max must lie in (0, 1], got {}",
                self.clip_max
            )));
        }
        if self.layer_set.is_empty() {
            return Err(Error::invalid("layer set is empty"));
        }
        if self.layer_set.contains(&self.anchor_layer) {
            return Err(Error::invalid(format!(
                "layer set contains the anchor layer {}",
                self.anchor_layer
            )));
        }
        crate::prob::check_temperature(self.temperature)
    }

    /// `min(alpha · O(divergences), clip_max)`.
    pub(crate) fn copy_probability_from(&self, divergences: &[f64]) -> Result<f64> {
        let raw = self
            .aggregator
            .apply(divergences)
            .ok_or_else(|| Error::invalid("no candidate layers to compare"))?;
        Ok(scaled_copy_probability(self.alpha, raw, self.clip_max))
    }
}

pub(crate) fn scaled_copy_probability(alpha: f64, raw: f64, clip_max: f64) -> f64 {
    if alpha == 0.0 {
        return 0.0;
    }
    (alpha * raw).min(clip_max)
}
