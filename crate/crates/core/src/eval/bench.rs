//! Decode-step latency against a plain-softmax baseline.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{AttentionRow, PigConfig, SourceSpan, StepDecoder, StepTrace};
use crate::error::{Error, Result};
use crate::kernels::{self, Isa};
use crate::prob::{LogitsVector, ProbVector};
use crate::TokenId;

pub const MIN_REPETITIONS: usize = 100;
const CONTEXT_LEN: usize = 512;
const DISTINCT_TRACES: usize = 4;
const WARMUP: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub median_us: f64,
    pub p99_us: f64,
    pub mean_us: f64,
    pub min_us: f64,
}

impl LatencyStats {
    fn from_samples(mut ns: Vec<u64>) -> Self {
        ns.sort_unstable();
        let n = ns.len();
        let median = if n % 2 == 1 {
            ns[n / 2] as f64
        } else {
            (ns[n / 2 - 1] + ns[n / 2]) as f64 / 2.0
        };
        let p99 = ns[((n as f64 * 0.99).ceil() as usize).clamp(1, n) - 1] as f64;
        let mean = ns.iter().sum::<u64>() as f64 / n as f64;
        LatencyStats {
            median_us: median / 1e3,
            p99_us: p99 / 1e3,
            mean_us: mean / 1e3,
            min_us: ns[0] as f64 / 1e3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub vocab_size: usize,
    pub layer_count: usize,
    pub repetitions: usize,
    pub isa: String,
    pub decode_step: LatencyStats,
    /// Softmax of the anchor logits only.
    pub baseline: LatencyStats,
    /// Median decode-step cost over median baseline cost.
    pub ratio: f64,
    pub wall_ms: f64,
}

/// Random traces with `layer_count` candidate layers `0..layer_count` and the
/// anchor at `layer_count`.
pub fn bench_traces(vocab_size: usize, layer_count: usize, count: usize, seed: u64) -> Result<Vec<StepTrace>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let span = SourceSpan::new(16, CONTEXT_LEN - 64)?;
    (0..count)
        .map(|_| {
            let context: Vec<TokenId> = (0..CONTEXT_LEN)
                .map(|_| rng.random_range(0..vocab_size) as TokenId)
                .collect();
            let anchor: Vec<f32> = (0..vocab_size).map(|_| rng.random_range(-4.0..4.0)).collect();
            let mut layers = BTreeMap::new();
            for l in 0..layer_count {
                let noise = 0.1 + l as f32 * 0.05;
                let x: Vec<f32> = anchor.iter().map(|a| a + noise * rng.random_range(-1.0f32..1.0)).collect();
                layers.insert(l, LogitsVector::new(x)?);
            }
            layers.insert(layer_count, LogitsVector::new(anchor)?);
            let w: Vec<f64> = (0..CONTEXT_LEN).map(|_| rng.random_range(0.0..1.0)).collect();
            let total: f64 = w.iter().sum();
            let attn = AttentionRow::new(w.into_iter().map(|x| x / total).collect())?;
            StepTrace::new(context, span, layers, attn)
        })
        .collect()
}

/// Times `decode_step` at the given vocabulary and candidate-layer count.
/// The config's anchor and layer set are replaced to match the synthetic
/// traces; all other fields are used as given.
pub fn bench_step(config: &PigConfig, vocab_size: usize, layer_count: usize, repetitions: usize) -> Result<BenchReport> {
    if repetitions < MIN_REPETITIONS {
        return Err(Error::invalid(format!(
            "repetitions must be at least {MIN_REPETITIONS}, got {repetitions}"
        )));
    }
    if vocab_size == 0 || layer_count == 0 {
        return Err(Error::invalid("vocab_size and layer_count must be at least 1"));
    }
    let config = PigConfig {
        anchor_layer: layer_count,
        attention_layer: layer_count,
        layer_set: (0..layer_count).collect(),
        ..config.clone()
    };
    config.validate()?;
    let traces = bench_traces(vocab_size, layer_count, DISTINCT_TRACES, config.seed)?;
    let isa = Isa::detect();
    let wall = Instant::now();

    let mut decoder = StepDecoder::with_isa(isa);
    let mut decode_ns = Vec::with_capacity(repetitions);
    for i in 0..WARMUP + repetitions {
        let trace = &traces[i % traces.len()];
        let start = Instant::now();
        let out = decoder.decode(trace, &config)?;
        let elapsed = start.elapsed().as_nanos() as u64;
        std::hint::black_box(&out);
        if i >= WARMUP {
            decode_ns.push(elapsed);
        }
    }

    let inv_temp = 1.0 / config.temperature;
    let mut baseline_ns = Vec::with_capacity(repetitions);
    for i in 0..WARMUP + repetitions {
        let logits = traces[i % traces.len()].logits(layer_count)?.as_slice();
        let start = Instant::now();
        let mut probs = vec![0.0; vocab_size];
        kernels::softmax_into(isa, logits, inv_temp, &mut probs);
        let out = ProbVector::from_computed(probs);
        let elapsed = start.elapsed().as_nanos() as u64;
        std::hint::black_box(&out);
        if i >= WARMUP {
            baseline_ns.push(elapsed);
        }
    }

    let decode_step = LatencyStats::from_samples(decode_ns);
    let baseline = LatencyStats::from_samples(baseline_ns);
    Ok(BenchReport {
        vocab_size,
        layer_count,
        repetitions,
        isa: format!("{isa:?}").to_lowercase(),
        ratio: decode_step.median_us / baseline.median_us,
        decode_step,
        baseline,
        wall_ms: wall.elapsed().as_secs_f64() * 1e3,
    })
}
