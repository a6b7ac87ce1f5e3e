//! `.pigtrace` codec.
//!
//! UTF-8, one JSON object per line. Line 1 is the header:
//!
//! ```text
//! {"v":1,"vocab":V,"layers":[...],"anchor":N,"attn_layer":A,"prompt":[ids],"span":[start,end],"meta":{...}}
//! ```
//!
//! and every further line is one step:
//!
//! ```text
//! {"pos":t,"logits":{"<layer>":"<base64 f32le>",...},"attn":"<base64 f32le>","forced":id}
//! ```
//!
//! `pos` counts steps from 0, so the attention row of step `t` covers
//! `prompt.len() + t` positions. `forced` is present on teacher-forced steps
//! only. Unknown `meta` keys are preserved; unknown top-level keys are
//! rejected.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::ser::SerializeMap;
use serde::Serialize;
use serde_json::{Map, Value};
use thiserror::Error;

use super::SessionInfo;
use crate::engine::{AttentionRow, SourceSpan, StepTrace};
use crate::error::{Error, Result};
use crate::prob::LogitsVector;
use crate::TokenId;

pub const FORMAT_VERSION: u64 = 1;

const HEADER_KEYS: [&str; 8] = ["v", "vocab", "layers", "anchor", "attn_layer", "prompt", "span", "meta"];
const STEP_KEYS: [&str; 4] = ["pos", "logits", "attn", "forced"];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TraceError {
    #[error("empty trace: header line missing")]
    MissingHeader,
    #[error("malformed JSON: {0}")]
    Json(String),
    #[error("record is not a JSON object")]
    NotAnObject,
    #[error("missing field `{0}`")]
    MissingField(&'static str),
    #[error("unknown field `{0}`")]
    UnknownField(String),
    #[error("field `v`: unsupported format version {0} (supported: {FORMAT_VERSION})")]
    UnsupportedVersion(String),
    #[error("field `vocab`: {0}")]
    InvalidVocab(String),
    #[error("field `layers`: {0}")]
    InvalidLayers(String),
    #[error("field `anchor`: {0}")]
    InvalidAnchor(String),
    #[error("field `attn_layer`: {0}")]
    InvalidAttentionLayer(String),
    #[error("field `prompt`: {0}")]
    InvalidPrompt(String),
    #[error("field `span`: {0}")]
    InvalidSpan(String),
    #[error("field `meta`: {0}")]
    InvalidMeta(String),
    #[error("field `pos`: expected step position {expected}, found {found}")]
    StepPosition { expected: usize, found: String },
    #[error("field `logits`: {0}")]
    StepLayers(String),
    #[error("field `{field}`: {reason}")]
    Payload { field: String, reason: String },
    #[error("field `forced`: {0}")]
    InvalidForced(String),
}

impl TraceError {
    /// Stable machine-readable error category.
    pub fn category(&self) -> &'static str {
        match self {
            TraceError::MissingHeader => "missing-header",
            TraceError::Json(_) => "json",
            TraceError::NotAnObject => "not-an-object",
            TraceError::MissingField(_) => "missing-field",
            TraceError::UnknownField(_) => "unknown-field",
            TraceError::UnsupportedVersion(_) => "unsupported-version",
            TraceError::InvalidVocab(_) => "invalid-vocab",
            TraceError::InvalidLayers(_) => "invalid-layers",
            TraceError::InvalidAnchor(_) => "invalid-anchor",
            TraceError::InvalidAttentionLayer(_) => "invalid-attn-layer",
            TraceError::InvalidPrompt(_) => "invalid-prompt",
            TraceError::InvalidSpan(_) => "invalid-span",
            TraceError::InvalidMeta(_) => "invalid-meta",
            TraceError::StepPosition { .. } => "step-position",
            TraceError::StepLayers(_) => "step-layers",
            TraceError::Payload { .. } => "payload",
            TraceError::InvalidForced(_) => "invalid-forced",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceHeader {
    pub info: SessionInfo,
    pub meta: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub pos: usize,
    pub logits: BTreeMap<usize, LogitsVector>,
    pub attention: AttentionRow,
    pub forced: Option<TokenId>,
}

impl TraceStep {
    pub fn from_step(pos: usize, step: StepTrace, forced: Option<TokenId>) -> Self {
        let (_, _, logits, attention) = step.into_parts();
        TraceStep {
            pos,
            logits,
            attention,
            forced,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceFile {
    pub header: TraceHeader,
    pub steps: Vec<TraceStep>,
}

impl TraceFile {
    pub fn read_path(path: impl AsRef<Path>) -> Result<Self> {
        read_trace(&std::fs::read(path)?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        write_trace(self)
    }

    /// Forced tokens of every step, if every step has one.
    pub fn forced_tokens(&self) -> Option<Vec<TokenId>> {
        self.steps.iter().map(|s| s.forced).collect()
    }
}

// ---------------------------------------------------------------------------
// Writing
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct HeaderOut<'a> {
    v: u64,
    vocab: usize,
    layers: &'a [usize],
    anchor: usize,
    attn_layer: usize,
    prompt: &'a [TokenId],
    span: [usize; 2],
    meta: &'a Map<String, Value>,
}

#[derive(Serialize)]
struct StepOut<'a> {
    pos: usize,
    logits: LogitsOut<'a>,
    attn: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    forced: Option<TokenId>,
}

/// Layer keys in numeric rather than lexicographic order.
struct LogitsOut<'a>(&'a BTreeMap<usize, LogitsVector>);

impl Serialize for LogitsOut<'_> {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(self.0.len()))?;
        for (layer, logits) in self.0 {
            map.serialize_entry(&layer.to_string(), &encode_f32(logits.as_slice().iter().copied()))?;
        }
        map.end()
    }
}

fn encode_f32(values: impl Iterator<Item = f32>) -> String {
    let mut bytes = Vec::new();
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    BASE64.encode(bytes)
}

fn invalid(line: usize, e: TraceError) -> Error {
    Error::invalid(format!("trace record {line}: {e}"))
}

/// Serializes a trace. Attention weights are narrowed to f32.
pub fn write_trace(file: &TraceFile) -> Result<Vec<u8>> {
    let info = &file.header.info;
    check_header(info).map_err(|e| invalid(1, e))?;
    for (i, step) in file.steps.iter().enumerate() {
        check_step(info, i, step).map_err(|e| invalid(i + 2, e))?;
    }

    let mut out = serde_json::to_vec(&HeaderOut {
        v: FORMAT_VERSION,
        vocab: info.vocab_size,
        layers: &info.layers,
        anchor: info.anchor_layer,
        attn_layer: info.attention_layer,
        prompt: &info.prompt,
        span: info.source_span.into(),
        meta: &file.header.meta,
    })
    .map_err(|e| Error::invalid(e.to_string()))?;
    out.push(b'\n');
    for step in &file.steps {
        serde_json::to_writer(
            &mut out,
            &StepOut {
                pos: step.pos,
                logits: LogitsOut(&step.logits),
                attn: encode_f32(step.attention.as_slice().iter().map(|&w| w as f32)),
                forced: step.forced,
            },
        )
        .map_err(|e| Error::invalid(e.to_string()))?;
        out.push(b'\n');
    }
    Ok(out)
}

fn check_header(info: &SessionInfo) -> std::result::Result<(), TraceError> {
    if info.vocab_size == 0 || info.vocab_size > u32::MAX as usize {
        return Err(TraceError::InvalidVocab(format!(
            "vocabulary size {} out of range",
            info.vocab_size
        )));
    }
    if info.layers.is_empty() || info.layers.windows(2).any(|w| w[0] >= w[1]) {
        return Err(TraceError::InvalidLayers(
            "layer list must be non-empty and strictly increasing".into(),
        ));
    }
    if !info.layers.contains(&info.anchor_layer) {
        return Err(TraceError::InvalidAnchor(format!(
            "anchor layer {} not among recorded layers",
            info.anchor_layer
        )));
    }
    if info.attention_layer > info.anchor_layer {
        return Err(TraceError::InvalidAttentionLayer(format!(
            "attention layer {} above anchor layer {}",
            info.attention_layer, info.anchor_layer
        )));
    }
    if info.prompt.is_empty() {
        return Err(TraceError::InvalidPrompt("prompt is empty".into()));
    }
    if let Some(t) = info.prompt.iter().find(|t| **t as usize >= info.vocab_size) {
        return Err(TraceError::InvalidPrompt(format!(
            "token {t} outside vocabulary of {}",
            info.vocab_size
        )));
    }
    if info.source_span.end() > info.prompt.len() {
        return Err(TraceError::InvalidSpan(format!(
            "span [{}, {}) exceeds prompt length {}",
            info.source_span.start(),
            info.source_span.end(),
            info.prompt.len()
        )));
    }
    Ok(())
}

fn check_step(info: &SessionInfo, index: usize, step: &TraceStep) -> std::result::Result<(), TraceError> {
    if step.pos != index {
        return Err(TraceError::StepPosition {
            expected: index,
            found: step.pos.to_string(),
        });
    }
    let keys: Vec<usize> = step.logits.keys().copied().collect();
    if keys != info.layers {
        return Err(TraceError::StepLayers(format!(
            "step carries layers {keys:?}, header declares {:?}",
            info.layers
        )));
    }
    if let Some((l, x)) = step.logits.iter().find(|(_, x)| x.len() != info.vocab_size) {
        return Err(TraceError::Payload {
            field: format!("logits.{l}"),
            reason: format!("{} values, expected {}", x.len(), info.vocab_size),
        });
    }
    let want = info.prompt.len() + index;
    if step.attention.len() != want {
        return Err(TraceError::Payload {
            field: "attn".into(),
            reason: format!("{} values, expected {want}", step.attention.len()),
        });
    }
    if let Some(t) = step.forced {
        if t as usize >= info.vocab_size {
            return Err(TraceError::InvalidForced(format!(
                "token {t} outside vocabulary of {}",
                info.vocab_size
            )));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Reading
// ---------------------------------------------------------------------------

fn at(line: usize) -> impl Fn(TraceError) -> Error {
    move |source| Error::Trace { line, source }
}

pub fn read_trace(bytes: &[u8]) -> Result<TraceFile> {
    let text = std::str::from_utf8(bytes)
        .map_err(|e| Error::Trace {
            line: 1,
            source: TraceError::Json(format!("invalid UTF-8: {e}")),
        })?;
    let mut lines: Vec<&str> = text.split('\n').collect();
    if lines.last() == Some(&"") {
        lines.pop();
    }
    let (head, rest) = lines.split_first().ok_or(Error::Trace {
        line: 1,
        source: TraceError::MissingHeader,
    })?;
    let header = parse_header(head).map_err(at(1))?;
    let mut steps = Vec::with_capacity(rest.len());
    for (i, line) in rest.iter().enumerate() {
        steps.push(parse_step(&header.info, i, line).map_err(at(i + 2))?);
    }
    Ok(TraceFile { header, steps })
}

fn parse_object(line: &str, allowed: &[&str]) -> std::result::Result<Map<String, Value>, TraceError> {
    let value: Value = serde_json::from_str(line).map_err(|e| TraceError::Json(e.to_string()))?;
    let Value::Object(obj) = value else {
        return Err(TraceError::NotAnObject);
    };
    if let Some(k) = obj.keys().find(|k| !allowed.contains(&k.as_str())) {
        return Err(TraceError::UnknownField(k.clone()));
    }
    Ok(obj)
}

fn field<'a>(obj: &'a Map<String, Value>, name: &'static str) -> std::result::Result<&'a Value, TraceError> {
    obj.get(name).ok_or(TraceError::MissingField(name))
}

fn uint_list(v: &Value) -> Option<Vec<u64>> {
    v.as_array()?.iter().map(Value::as_u64).collect()
}

fn parse_header(line: &str) -> std::result::Result<TraceHeader, TraceError> {
    let obj = parse_object(line, &HEADER_KEYS)?;

    let v = field(&obj, "v")?;
    if v.as_u64() != Some(FORMAT_VERSION) {
        return Err(TraceError::UnsupportedVersion(v.to_string()));
    }

    let vocab = field(&obj, "vocab")?
        .as_u64()
        .filter(|v| *v >= 1 && *v <= u32::MAX as u64)
        .ok_or_else(|| TraceError::InvalidVocab("expected an integer in [1, 2^32)".into()))?
        as usize;

    let layers: Vec<usize> = uint_list(field(&obj, "layers")?)
        .ok_or_else(|| TraceError::InvalidLayers("expected an array of layer indices".into()))?
        .into_iter()
        .map(|l| l as usize)
        .collect();

    let anchor = field(&obj, "anchor")?
        .as_u64()
        .ok_or_else(|| TraceError::InvalidAnchor("expected a layer index".into()))?
        as usize;

    let attn_layer = field(&obj, "attn_layer")?
        .as_u64()
        .ok_or_else(|| TraceError::InvalidAttentionLayer("expected a layer index".into()))?
        as usize;

    let prompt_raw = uint_list(field(&obj, "prompt")?)
        .ok_or_else(|| TraceError::InvalidPrompt("expected an array of token ids".into()))?;
    let prompt: Vec<TokenId> = prompt_raw
        .iter()
        .map(|&t| TokenId::try_from(t).map_err(|_| TraceError::InvalidPrompt(format!("token {t} out of range"))))
        .collect::<std::result::Result<_, _>>()?;

    let span = uint_list(field(&obj, "span")?)
        .filter(|s| s.len() == 2)
        .ok_or_else(|| TraceError::InvalidSpan("expected [start, end]".into()))?;
    let span = SourceSpan::new(span[0] as usize, span[1] as usize)
        .map_err(|e| TraceError::InvalidSpan(e.to_string()))?;

    let meta = match obj.get("meta") {
        None => Map::new(),
        Some(Value::Object(m)) => m.clone(),
        Some(_) => return Err(TraceError::InvalidMeta("expected a JSON object".into())),
    };

    let info = SessionInfo {
        vocab_size: vocab,
        layers,
        anchor_layer: anchor,
        attention_layer: attn_layer,
        prompt,
        source_span: span,
    };
    check_header(&info)?;
    Ok(TraceHeader { info, meta })
}

fn decode_f32(field: &str, v: &Value, expected: usize) -> std::result::Result<Vec<f32>, TraceError> {
    let payload = |reason: String| TraceError::Payload {
        field: field.to_string(),
        reason,
    };
    let s = v.as_str().ok_or_else(|| payload("expected a base64 string".into()))?;
    let bytes = BASE64.decode(s).map_err(|e| payload(format!("bad base64: {e}")))?;
    if bytes.len() != expected * 4 {
        return Err(payload(format!(
            "{} bytes, expected {} ({expected} f32 values)",
            bytes.len(),
            expected * 4
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn parse_step(info: &SessionInfo, index: usize, line: &str) -> std::result::Result<TraceStep, TraceError> {
    let obj = parse_object(line, &STEP_KEYS)?;

    let pos = field(&obj, "pos")?;
    if pos.as_u64() != Some(index as u64) {
        return Err(TraceError::StepPosition {
            expected: index,
            found: pos.to_string(),
        });
    }

    let Value::Object(raw_logits) = field(&obj, "logits")? else {
        return Err(TraceError::StepLayers("expected an object keyed by layer".into()));
    };
    let mut logits = BTreeMap::new();
    for (key, payload) in raw_logits {
        let layer: usize = key
            .parse()
            .map_err(|_| TraceError::StepLayers(format!("bad layer key `{key}`")))?;
        let name = format!("logits.{key}");
        let values = decode_f32(&name, payload, info.vocab_size)?;
        let values = LogitsVector::new(values).map_err(|e| TraceError::Payload {
            field: name,
            reason: e.to_string(),
        })?;
        logits.insert(layer, values);
    }
    let present: BTreeSet<usize> = logits.keys().copied().collect();
    let declared: BTreeSet<usize> = info.layers.iter().copied().collect();
    if present != declared {
        return Err(TraceError::StepLayers(format!(
            "step carries layers {present:?}, header declares {declared:?}"
        )));
    }

    let attn_len = info.prompt.len() + index;
    let attn = decode_f32("attn", field(&obj, "attn")?, attn_len)?;
    let attention = AttentionRow::new(attn.into_iter().map(f64::from).collect()).map_err(|e| {
        TraceError::Payload {
            field: "attn".into(),
            reason: e.to_string(),
        }
    })?;

    let forced = match obj.get("forced") {
        None | Some(Value::Null) => None,
        Some(v) => {
            let t = v
                .as_u64()
                .filter(|t| (*t as usize) < info.vocab_size)
                .ok_or_else(|| {
                    TraceError::InvalidForced(format!(
                        "expected a token id below {}, got {v}",
                        info.vocab_size
                    ))
                })?;
            Some(t as TokenId)
        }
    };

    Ok(TraceStep {
        pos: index,
        logits,
        attention,
        forced,
    })
}
