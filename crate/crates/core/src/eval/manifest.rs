//! Locating the scoring trace of each `(item, candidate)` pair.
//!
//! A trace directory may carry `manifest.jsonl` with one
//! `{"item": i, "candidate": <candidate>, "file": "<relative path>"}` record
//! per trace; extra keys are ignored. Without a manifest every `*.pigtrace`
//! file in the directory is indexed by the `item` and `candidate` keys of its
//! header `meta`.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde_json::Value;

use super::dataset::Candidate;
use crate::backend::{TraceFile, TraceSession};
use crate::error::{Error, Result};
use crate::TokenId;

pub const MANIFEST_NAME: &str = "manifest.jsonl";

#[derive(Debug, Clone, Default)]
pub struct TraceIndex {
    files: HashMap<(usize, String), PathBuf>,
}

impl TraceIndex {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest = dir.join(MANIFEST_NAME);
        if manifest.exists() {
            Self::from_manifest(dir, &std::fs::read_to_string(manifest)?)
        } else {
            Self::from_headers(dir)
        }
    }

    fn from_manifest(dir: &Path, text: &str) -> Result<Self> {
        let mut files = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            if raw.trim().is_empty() {
                continue;
            }
            let err = |field: &str, message: &str| Error::Dataset {
                line: i + 1,
                field: format!("{MANIFEST_NAME}:{field}"),
                message: message.to_string(),
            };
            let v: Value = serde_json::from_str(raw).map_err(|_| err("<record>", "malformed JSON"))?;
            let item = v
                .get("item")
                .and_then(Value::as_u64)
                .ok_or_else(|| err("item", "expected an item index"))?;
            let candidate: Candidate = v
                .get("candidate")
                .cloned()
                .and_then(|c| serde_json::from_value(c).ok())
                .ok_or_else(|| err("candidate", "expected a string or an array of token ids"))?;
            let file = v
                .get("file")
                .and_then(Value::as_str)
                .ok_or_else(|| err("file", "expected a relative path"))?;
            files.insert((item as usize, candidate.key()), dir.join(file));
        }
        Ok(TraceIndex { files })
    }

    fn from_headers(dir: &Path) -> Result<Self> {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "pigtrace"))
            .collect();
        paths.sort();
        let mut files = HashMap::new();
        for path in paths {
            let text = std::fs::read(&path)?;
            let head_end = text.iter().position(|&b| b == b'\n').unwrap_or(text.len());
            let file = crate::backend::read_trace(&text[..head_end]).map_err(|e| {
                Error::invalid(format!("{}: {e}", path.display()))
            })?;
            let meta = &file.header.meta;
            let item = meta.get("item").and_then(Value::as_u64);
            let candidate = meta
                .get("candidate")
                .cloned()
                .and_then(|c| serde_json::from_value::<Candidate>(c).ok());
            if let (Some(item), Some(candidate)) = (item, candidate) {
                files.insert((item as usize, candidate.key()), path);
            }
        }
        Ok(TraceIndex { files })
    }

    pub fn len(&self) -> usize {
        self.files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }

    pub fn path(&self, item: usize, candidate: &Candidate) -> Result<&Path> {
        self.files
            .get(&(item, candidate.key()))
            .map(PathBuf::as_path)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "no trace for item {item}, candidate {}",
                    candidate.key()
                ))
            })
    }

    /// Replay session and the tokens to teacher-force. Text candidates take
    /// their ids from the trace's recorded forced tokens.
    pub fn load(&self, item: usize, candidate: &Candidate) -> Result<(TraceSession, Vec<TokenId>)> {
        let path = self.path(item, candidate)?;
        let file = TraceFile::read_path(path).map_err(|e| match e {
            Error::Trace { line, source } => Error::invalid(format!(
                "{} line {line}: {source}",
                path.display()
            )),
            other => other,
        })?;
        let tokens = match candidate {
            Candidate::Tokens(t) => t.clone(),
            Candidate::Text(_) => file.forced_tokens().ok_or_else(|| {
                Error::invalid(format!(
                    "{}: text candidate needs a forced token on every step",
                    path.display()
                ))
            })?,
        };
        Ok((TraceSession::new(file), tokens))
    }
}
