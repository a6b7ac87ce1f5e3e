use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::codec::{TraceFile, TraceHeader, TraceStep};
use super::{Cursor, Session, SessionInfo};
use crate::engine::{AttentionRow, SourceSpan, StepTrace};
use crate::error::{Error, Result};
use crate::prob::{self, LogitsVector};
use crate::TokenId;

/// Attempts at reaching the divergence floor; the perturbation doubles each time.
const MAX_ATTEMPTS: u32 = 64;
const BASE_LOGIT_RANGE: f32 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepKind {
    /// Every layer carries bit-identical logits.
    Function,
    /// Each candidate layer diverges from the anchor by at least the floor.
    Content,
}

impl StepKind {
    /// Parses a plan such as `f,f,c,f` (or `function,content`).
    pub fn parse_plan(plan: &str) -> Result<Vec<StepKind>> {
        if plan.trim().is_empty() {
            return Ok(Vec::new());
        }
        plan.split(',').map(|s| s.trim().parse()).collect()
    }

    pub fn format_plan(steps: &[StepKind]) -> String {
        let parts: Vec<&str> = steps
            .iter()
            .map(|k| match k {
                StepKind::Function => "f",
                StepKind::Content => "c",
            })
            .collect();
        parts.join(",")
    }
}

impl FromStr for StepKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f" | "function" => Ok(StepKind::Function),
            "c" | "content" => Ok(StepKind::Content),
            other => Err(Error::invalid(format!(
                "unknown step kind `{other}` (expected f or c)"
            ))),
        }
    }
}

impl fmt::Display for StepKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StepKind::Function => "function",
            StepKind::Content => "content",
        })
    }
}

/// Recipe for a deterministic synthetic session.
///
/// Layers are `0..num_layers`; the top one is the anchor and supplies the
/// attention row. The prompt is two filler tokens, the span tokens, then one
/// filler token. Step `t` depends only on `(seed, t)` and the context length,
/// never on the tokens fed back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub vocab_size: usize,
    pub num_layers: usize,
    pub steps: Vec<StepKind>,
    /// Initial amplitude of the candidate-layer perturbation on content steps.
    pub content_magnitude: f64,
    /// Minimum anchor/candidate divergence on content steps, below ln 2.
    pub jsd_floor: f64,
    pub span_tokens: Vec<TokenId>,
}

impl SyntheticSpec {
    /// Defaults: magnitude 1, floor 0.05, four seeded span tokens.
    pub fn new(seed: u64, vocab_size: usize, num_layers: usize, steps: Vec<StepKind>) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, u64::MAX));
        let span_tokens = if vocab_size == 0 {
            Vec::new()
        } else {
            (0..4).map(|_| rng.random_range(0..vocab_size) as TokenId).collect()
        };
        SyntheticSpec {
            seed,
            vocab_size,
            num_layers,
            steps,
            content_magnitude: 1.0,
            jsd_floor: 0.05,
            span_tokens,
        }
    }

    pub fn with_span_tokens(mut self, tokens: Vec<TokenId>) -> Self {
        self.span_tokens = tokens;
        self
    }

    pub fn with_jsd_floor(mut self, floor: f64) -> Self {
        self.jsd_floor = floor;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 {
            return Err(Error::invalid("synthetic vocab_size must be at least 1"));
        }
        if self.vocab_size > u32::MAX as usize {
            return Err(Error::invalid("synthetic vocab_size exceeds the token id range"));
        }
        if self.num_layers == 0 {
            return Err(Error::invalid("synthetic num_layers must be at least 1"));
        }
        if self.span_tokens.is_empty() {
            return Err(Error::invalid("synthetic span_tokens is empty"));
        }
        if let Some(t) = self.span_tokens.iter().find(|t| **t as usize >= self.vocab_size) {
            return Err(Error::invalid(format!(
                "synthetic span token {t} outside vocabulary of {}",
                self.vocab_size
            )));
        }
        if !(self.content_magnitude.is_finite() && self.content_magnitude > 0.0) {
            return Err(Error::invalid(format!(
                "content_magnitude must be finite and > 0, got {}",
                self.content_magnitude
            )));
        }
        if !(self.jsd_floor >= 0.0 && self.jsd_floor < std::f64::consts::LN_2) {
            return Err(Error::invalid(format!(
                "jsd_floor must lie in [0, ln 2), got {}",
                self.jsd_floor
            )));
        }
        Ok(())
    }

    pub fn anchor_layer(&self) -> usize {
        self.num_layers - 1
    }

    fn info(&self) -> SessionInfo {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed, u64::MAX - 1));
        let mut filler = || rng.random_range(0..self.vocab_size) as TokenId;
        let mut prompt = vec![filler(), filler()];
        prompt.extend_from_slice(&self.span_tokens);
        prompt.push(filler());
        let anchor = self.anchor_layer();
        SessionInfo {
            vocab_size: self.vocab_size,
            layers: (0..self.num_layers).collect(),
            anchor_layer: anchor,
            attention_layer: anchor,
            source_span: SourceSpan::new(2, 2 + self.span_tokens.len()).expect("span non-empty"),
            prompt,
        }
    }

    /// Logits and attention for step `t` over a context of `context_len`.
    fn build_step(&self, t: usize, context_len: usize) -> Result<(BTreeMap<usize, LogitsVector>, AttentionRow)> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed, t as u64));
        let base: Vec<f32> = (0..self.vocab_size)
            .map(|_| rng.random_range(-BASE_LOGIT_RANGE..=BASE_LOGIT_RANGE))
            .collect();
        let weights: Vec<f64> = (0..context_len).map(|_| rng.random_range(0.05..1.0)).collect();
        let total: f64 = weights.iter().sum();
        let attention = AttentionRow::new(weights.into_iter().map(|w| w / total).collect())?;

        let anchor = self.anchor_layer();
        let mut layers = BTreeMap::new();
        let base_logits = LogitsVector::new(base.clone())?;
        match self.steps[t] {
            StepKind::Function => {
                for l in 0..self.num_layers {
                    layers.insert(l, base_logits.clone());
                }
            }
            StepKind::Content => {
                let anchor_probs = base_logits.softmax(1.0)?;
                for l in 0..anchor {
                    layers.insert(l, self.diverging_layer(&mut rng, &base, &anchor_probs, t, l)?);
                }
                layers.insert(anchor, base_logits);
            }
        }
        Ok((layers, attention))
    }

    fn diverging_layer(
        &self,
        rng: &mut ChaCha8Rng,
        base: &[f32],
        anchor: &prob::ProbVector,
        t: usize,
        layer: usize,
    ) -> Result<LogitsVector> {
        let mut magnitude = self.content_magnitude;
        for _ in 0..MAX_ATTEMPTS {
            let logits: Vec<f32> = base
                .iter()
                .map(|&b| (b as f64 + magnitude * rng.random_range(-1.0..=1.0)) as f32)
                .collect();
            if logits.iter().all(|x| x.is_finite()) {
                let logits = LogitsVector::new(logits)?;
                // Checked on the emitted f32 values, as a reader would see them.
                if prob::jsd(anchor, &logits.softmax(1.0)?)? >= self.jsd_floor {
                    return Ok(logits);
                }
            }
            magnitude *= 2.0;
        }
        Err(Error::invalid(format!(
            "synthetic step {t}, layer {layer}: divergence floor {} not reached",
            self.jsd_floor
        )))
    }

    /// Runs the whole plan and records it. With `forced`, every step is
    /// teacher-forced with the given tokens; otherwise the plain argmax of the
    /// anchor logits is fed back and steps carry no `forced` field.
    pub fn record(&self, forced: Option<&[TokenId]>) -> Result<TraceFile> {
        if let Some(f) = forced {
            if f.len() != self.steps.len() {
                return Err(Error::invalid(format!(
                    "{} forced tokens for a plan of {} steps",
                    f.len(),
                    self.steps.len()
                )));
            }
        }
        let mut session = SyntheticSession::new(self.clone())?;
        let mut steps = Vec::with_capacity(self.steps.len());
        for t in 0..self.steps.len() {
            let token = forced.map(|f| f[t]);
            let trace = session.next_step(token)?;
            if token.is_none() {
                let next = trace.logits(self.anchor_layer())?.softmax(1.0)?.argmax() as TokenId;
                session.advance(next)?;
            }
            steps.push(TraceStep::from_step(t, trace, token));
        }
        let mut meta = Map::new();
        meta.insert("source".into(), Value::from("synthetic"));
        meta.insert("seed".into(), Value::from(self.seed));
        meta.insert("plan".into(), Value::from(StepKind::format_plan(&self.steps)));
        Ok(TraceFile {
            header: TraceHeader {
                info: session.info().clone(),
                meta,
            },
            steps,
        })
    }
}

/// SplitMix64 finalizer over `seed` and a stream index.
fn mix(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct SyntheticSession {
    spec: SyntheticSpec,
    info: SessionInfo,
    cursor: Cursor,
}

impl SyntheticSession {
    pub fn new(spec: SyntheticSpec) -> Result<Self> {
        spec.validate()?;
        let info = spec.info();
        let cursor = Cursor::new(&info.prompt);
        Ok(SyntheticSession { spec, info, cursor })
    }

    pub fn spec(&self) -> &SyntheticSpec {
        &self.spec
    }
}

impl Session for SyntheticSession {
    fn info(&self) -> &SessionInfo {
        &self.info
    }

    fn position(&self) -> usize {
        self.cursor.position()
    }

    fn next_step(&mut self, forced: Option<TokenId>) -> Result<StepTrace> {
        self.cursor.begin(&self.info, forced)?;
        let t = self.cursor.position();
        if t >= self.spec.steps.len() {
            return Err(Error::EndOfTrace { position: t });
        }
        let context = self.cursor.context().to_vec();
        let (layers, attention) = self.spec.build_step(t, context.len())?;
        let trace = StepTrace::new(context, self.info.source_span, layers, attention)?;
        self.cursor.finish(forced);
        Ok(trace)
    }

    fn advance(&mut self, token: TokenId) -> Result<()> {
        self.cursor.advance(&self.info, token)
    }
}
