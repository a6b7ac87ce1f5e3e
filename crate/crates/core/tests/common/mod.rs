//! Shared test fixtures: a random trace generator and a deliberately naive
//! reimplementation of the decode step, written without reference to the
//! engine internals.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use ptrmix::engine::{Aggregator, AttentionRow, PigConfig, SourceSpan, StepTrace};
use ptrmix::prob::LogitsVector;
use ptrmix::TokenId;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const AGGREGATORS: [Aggregator; 3] = [Aggregator::Mean, Aggregator::Max, Aggregator::Min];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone)]
pub struct RandomCase {
    pub trace: StepTrace,
    pub anchor: usize,
    pub candidates: Vec<usize>,
    pub filter: BTreeSet<TokenId>,
    pub temperature: f64,
}

impl RandomCase {
    pub fn config(&self, alpha: f64, aggregator: Aggregator) -> PigConfig {
        let mut c = PigConfig::new(self.anchor, self.candidates.clone())
            .with_alpha(alpha)
            .with_aggregator(aggregator)
            .with_temperature(self.temperature);
        c.token_filter = self.filter.clone();
        c
    }
}

/// Layers `0..num_layers`, anchor on top, every lower layer a candidate.
/// Mixes identical, nearby and unrelated candidate layers, zero attention
/// weights, repeated span tokens, token filters and degenerate spans.
pub fn random_case(rng: &mut ChaCha8Rng, vocab: usize, num_layers: usize) -> RandomCase {
    let context_len = rng.random_range(1..=24);
    let context: Vec<TokenId> = (0..context_len)
        .map(|_| rng.random_range(0..vocab) as TokenId)
        .collect();
    let start = rng.random_range(0..context_len);
    let end = rng.random_range(start + 1..=context_len);
    let attention: Vec<f64> = (0..context_len)
        .map(|_| if rng.random_bool(0.1) { 0.0 } else { rng.random_range(0.0..1.0) })
        .collect();
    let total: f64 = attention.iter().sum::<f64>().max(1e-300);
    let attention: Vec<f64> = attention.iter().map(|w| w / total).collect();

    let scale = [0.5f32, 2.0, 8.0][rng.random_range(0..3)];
    let anchor_logits: Vec<f32> = (0..vocab).map(|_| scale * rng.random_range(-1.0f32..1.0)).collect();
    let anchor = num_layers - 1;
    let mut layers = BTreeMap::new();
    for l in 0..anchor {
        let x: Vec<f32> = match rng.random_range(0..4) {
            0 => anchor_logits.clone(),
            1 => {
                let eps = rng.random_range(0.001f32..0.1);
                anchor_logits.iter().map(|a| a + eps * rng.random_range(-1.0f32..1.0)).collect()
            }
            2 => {
                let m = rng.random_range(0.1f32..5.0);
                anchor_logits.iter().map(|a| a + m * rng.random_range(-1.0f32..1.0)).collect()
            }
            _ => (0..vocab).map(|_| scale * rng.random_range(-3.0f32..3.0)).collect(),
        };
        layers.insert(l, LogitsVector::new(x).unwrap());
    }
    layers.insert(anchor, LogitsVector::new(anchor_logits).unwrap());

    let mut filter = BTreeSet::new();
    if rng.random_bool(0.3) {
        for _ in 0..rng.random_range(1..=3) {
            filter.insert(rng.random_range(0..vocab) as TokenId);
        }
    }
    let temperature = [1.0, 0.8, 1.7][rng.random_range(0..3)];

    let trace = StepTrace::new(
        context,
        SourceSpan::new(start, end).unwrap(),
        layers,
        AttentionRow::new(attention).unwrap(),
    )
    .unwrap();
    RandomCase {
        trace,
        anchor,
        candidates: (0..anchor).collect(),
        filter,
        temperature,
    }
}

pub fn naive_softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|x| ((x - max) / temperature).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub fn naive_kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi).ln())
        .sum()
}

pub fn naive_jsd(p: &[f64], q: &[f64]) -> f64 {
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| (a + b) / 2.0).collect();
    0.5 * naive_kl(p, &m) + 0.5 * naive_kl(q, &m)
}

#[derive(Debug, Clone)]
pub struct OracleOut {
    pub probs: Vec<f64>,
    pub copy_probability: f64,
    pub vocab: Vec<f64>,
    pub source: Vec<f64>,
}

/// Brute-force decode step: dense vectors, std math, no shortcuts.
pub fn oracle(trace: &StepTrace, config: &PigConfig) -> OracleOut {
    let logits = |l: usize| -> Vec<f64> {
        trace.logits(l).unwrap().as_slice().iter().map(|&x| x as f64).collect()
    };
    let anchor = logits(config.anchor_layer);
    let vocab_size = anchor.len();

    let q_anchor = naive_softmax(&anchor, 1.0);
    let divergences: Vec<f64> = config
        .layer_set
        .iter()
        .map(|&l| naive_jsd(&q_anchor, &naive_softmax(&logits(l), 1.0)))
        .collect();
    let aggregate = match config.aggregator {
        Aggregator::Mean => divergences.iter().sum::<f64>() / divergences.len() as f64,
        Aggregator::Max => divergences.iter().copied().fold(f64::MIN, f64::max),
        Aggregator::Min => divergences.iter().copied().fold(f64::MAX, f64::min),
    };
    let mut p_cp = (config.alpha * aggregate).min(config.clip_max);

    let mut source = vec![0.0; vocab_size];
    let mut total = 0.0;
    let span = trace.source_span();
    for i in span.start()..span.end() {
        let t = trace.context_tokens()[i];
        if !config.token_filter.contains(&t) {
            total += trace.attention().as_slice()[i];
        }
    }
    if total > 0.0 {
        for i in span.start()..span.end() {
            let t = trace.context_tokens()[i];
            if !config.token_filter.contains(&t) {
                source[t as usize] += trace.attention().as_slice()[i] / total;
            }
        }
    } else {
        p_cp = 0.0;
    }

    let vocab = naive_softmax(&anchor, config.temperature);
    let probs = (0..vocab_size)
        .map(|v| p_cp * source[v] + (1.0 - p_cp) * vocab[v])
        .collect();
    OracleOut {
        probs,
        copy_probability: p_cp,
        vocab,
        source,
    }
}
