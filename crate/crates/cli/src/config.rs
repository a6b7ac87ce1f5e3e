//! Run configuration: defaults, then the `--config` file, then explicit flags.

use std::path::{Path, PathBuf};

use ptrmix::backend::SessionInfo;
use ptrmix::decoder::{SamplingMode, SamplingParams, DEFAULT_MAX_NEW_TOKENS, DEFAULT_SAMPLING_TEMPERATURE};
use ptrmix::engine::{Aggregator, LayerSelector, PigConfig, DEFAULT_ALPHA, DEFAULT_CLIP_MAX};
use ptrmix::eval::Mc3Averaging;
use ptrmix::TokenId;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::Failure;

/// Metric maximized when choosing α on the training folds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SelectMetric {
    Mc1,
    #[default]
    Mc2,
    Mc3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthOptions {
    pub steps: String,
    pub vocab: usize,
    pub layers: usize,
    /// Seeded span tokens when absent.
    pub span: Option<Vec<TokenId>>,
    pub floor: Option<f64>,
    /// Teacher-forced tokens, one per step.
    pub forced: Option<Vec<TokenId>>,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            steps: "f,c,f,c".into(),
            vocab: 16,
            layers: 8,
            span: None,
            floor: None,
            forced: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchOptions {
    pub vocab: usize,
    pub layer_counts: Vec<usize>,
    pub reps: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            vocab: 32_000,
            layer_counts: vec![16],
            reps: 100,
        }
    }
}

/// Everything a run depends on. Field names match the long flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: String,
    /// α grid; every entry is run.
    pub alpha: Vec<f64>,
    pub agg: Aggregator,
    pub layers: LayerSelector,
    /// Anchor layer; the trace's own anchor when absent.
    pub anchor: Option<usize>,
    /// Must equal the trace's attention layer when given.
    pub attn_layer: Option<usize>,
    pub clip: f64,
    /// Vocabulary temperature. Defaults to 0.8 for `decode` and 1 elsewhere.
    pub temperature: Option<f64>,
    pub filter: Vec<TokenId>,
    pub max_new_tokens: usize,
    pub greedy: bool,
    pub stop: Vec<TokenId>,
    pub seed: u64,
    pub trace: Option<PathBuf>,
    /// Candidate for `score`; the trace's forced tokens when absent.
    pub tokens: Option<Vec<TokenId>>,
    pub data: Option<PathBuf>,
    pub trace_dir: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub mc3: Mc3Averaging,
    /// Folds for α selection; below 2 disables selection.
    pub folds: usize,
    pub fold_seed: u64,
    pub select: SelectMetric,
    pub synth: SynthOptions,
    pub bench: BenchOptions,
    pub out: Option<PathBuf>,
    /// Worker threads; 0 picks the core count.
    pub jobs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            command: String::new(),
            alpha: vec![DEFAULT_ALPHA],
            agg: Aggregator::Max,
            layers: LayerSelector::Last {
                count: 16,
                parity: None,
            },
            anchor: None,
            attn_layer: None,
            clip: DEFAULT_CLIP_MAX,
            temperature: None,
            filter: Vec::new(),
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
            greedy: false,
            stop: Vec::new(),
            seed: 0,
            trace: None,
            tokens: None,
            data: None,
            trace_dir: None,
            predictions: None,
            mc3: Mc3Averaging::Multiset,
            folds: 1,
            fold_seed: 0,
            select: SelectMetric::Mc2,
            synth: SynthOptions::default(),
            bench: BenchOptions::default(),
            out: None,
            jobs: 0,
        }
    }
}

/// Fields that cannot change any reported value.
const UNFINGERPRINTED: [&str; 2] = ["out", "jobs"];

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
    }

    /// SHA-256 of the canonical JSON form, minus output-only fields.
    pub fn fingerprint(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        let obj = v.as_object_mut().expect("config is an object");
        for k in UNFINGERPRINTED {
            obj.remove(k);
        }
        let canonical = serde_json::to_string(&v).expect("value serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn validate(&self) -> Result<(), Failure> {
        if self.alpha.is_empty() {
            return Err(Failure::Input("alpha grid is empty".into()));
        }
        if self.folds >= 2 && self.data.is_none() {
            return Err(Failure::Input("fold selection needs --data".into()));
        }
        Ok(())
    }

    /// Engine config for one α against a session's layout.
    pub fn pig_config(&self, info: &SessionInfo, alpha: f64, default_temperature: f64) -> Result<PigConfig, Failure> {
        let anchor = self.anchor.unwrap_or(info.anchor_layer);
        if !info.layers.contains(&anchor) {
            return Err(Failure::Input(format!(
                "anchor layer {anchor} not recorded in the trace (layers {:?})",
                info.layers
            )));
        }
        if let Some(a) = self.attn_layer {
            if a != info.attention_layer {
                return Err(Failure::Input(format!(
                    "--attn-layer {a} requested but the trace carries attention from layer {}",
                    info.attention_layer
                )));
            }
        }
        let layer_set = self.layers.resolve(anchor)?;
        if let Some(l) = layer_set.iter().find(|l| !info.layers.contains(l)) {
            return Err(Failure::Input(format!(
                "candidate layer {l} from `{}` not recorded in the trace",
                self.layers
            )));
        }
        let mut c = PigConfig::new(anchor, layer_set)
            .with_alpha(alpha)
            .with_aggregator(self.agg)
            .with_clip_max(self.clip)
            .with_temperature(self.temperature.unwrap_or(default_temperature));
        c.attention_layer = info.attention_layer;
        c.token_filter = self.filter.iter().copied().collect();
        c.seed = self.seed;
        c.validate()?;
        Ok(c)
    }

    pub fn sampling(&self, seed: u64) -> SamplingParams {
        SamplingParams {
            mode: if self.greedy {
                SamplingMode::Greedy
            } else {
                SamplingMode::Sample
            },
            temperature: self.temperature.unwrap_or(DEFAULT_SAMPLING_TEMPERATURE),
            max_new_tokens: self.max_new_tokens,
            stop_tokens: self.stop.iter().copied().collect(),
            seed,
        }
    }
}

/// Independent per-item seed.
pub fn item_seed(master: u64, item: u64) -> u64 {
    let mut z = master ^ item.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
