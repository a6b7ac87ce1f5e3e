//! JSONL dataset loaders. Errors name the 1-based line and the field.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::TokenId;

/// A scoreable continuation: raw text or pre-tokenized ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Candidate {
    Text(String),
    Tokens(Vec<TokenId>),
}

impl Candidate {
    pub fn tokens(&self) -> Option<&[TokenId]> {
        match self {
            Candidate::Tokens(t) => Some(t),
            Candidate::Text(_) => None,
        }
    }

    /// Canonical JSON, used as a lookup key.
    pub fn key(&self) -> String {
        serde_json::to_string(self).expect("candidate serializes")
    }
}

/// Whether `best_query` is repeated inside `good_queries`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GoodSetConvention {
    BestIncluded,
    BestSeparate,
    Mixed,
    /// No items.
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McItem {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content: Option<Candidate>,
    pub best_query: Candidate,
    pub good_queries: Vec<Candidate>,
    pub bad_queries: Vec<Candidate>,
}

impl McItem {
    /// `best_query` followed by the remaining good queries, exact duplicates
    /// removed.
    pub fn effective_good(&self) -> Vec<&Candidate> {
        let mut out = vec![&self.best_query];
        for g in &self.good_queries {
            if !out.contains(&g) {
                out.push(g);
            }
        }
        out
    }

    pub fn best_in_good(&self) -> bool {
        self.good_queries.contains(&self.best_query)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct McDataset {
    pub items: Vec<McItem>,
    pub convention: GoodSetConvention,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LengthClass {
    Short,
    Long,
}

/// Contexts with more than this many whitespace-separated words are long.
pub const LONG_CONTEXT_WORDS: usize = 200;

impl LengthClass {
    pub fn of(context: &str) -> Self {
        if context.split_whitespace().count() > LONG_CONTEXT_WORDS {
            LengthClass::Long
        } else {
            LengthClass::Short
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaItem {
    pub context: String,
    pub question: String,
    pub answers: Vec<String>,
    pub length_class: LengthClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorItem {
    pub prefix: Candidate,
    pub completions: Vec<Candidate>,
    pub correct_index: usize,
}

struct Record {
    line: usize,
    obj: Map<String, Value>,
}

impl Record {
    fn err(&self, field: &str, message: impl Into<String>) -> Error {
        Error::Dataset {
            line: self.line,
            field: field.to_string(),
            message: message.into(),
        }
    }

    fn get(&self, field: &str) -> Result<&Value> {
        self.obj
            .get(field)
            .ok_or_else(|| self.err(field, "missing required field"))
    }

    fn candidate_value(&self, field: &str, v: &Value) -> Result<Candidate> {
        serde_json::from_value(v.clone())
            .map_err(|_| self.err(field, "expected a string or an array of token ids"))
    }

    fn candidate(&self, field: &str) -> Result<Candidate> {
        let v = self.get(field)?;
        self.candidate_value(field, v)
    }

    fn candidates(&self, field: &str) -> Result<Vec<Candidate>> {
        let arr = self
            .get(field)?
            .as_array()
            .ok_or_else(|| self.err(field, "expected an array of candidates"))?;
        arr.iter()
            .enumerate()
            .map(|(i, v)| self.candidate_value(&format!("{field}[{i}]"), v))
            .collect()
    }

    fn string(&self, field: &str) -> Result<String> {
        self.get(field)?
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| self.err(field, "expected a string"))
    }
}

fn records(text: &str) -> Result<Vec<Record>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(raw).map_err(|e| Error::Dataset {
            line,
            field: "<record>".into(),
            message: format!("malformed JSON: {e}"),
        })?;
        let Value::Object(obj) = value else {
            return Err(Error::Dataset {
                line,
                field: "<record>".into(),
                message: "expected a JSON object".into(),
            });
        };
        out.push(Record { line, obj });
    }
    Ok(out)
}

/// Reads `{content, best_query, good_queries, bad_queries}` records.
pub fn load_mc(text: &str) -> Result<McDataset> {
    let mut items = Vec::new();
    for r in records(text)? {
        let content = match r.obj.get("content") {
            None | Some(Value::Null) => None,
            Some(v) => Some(r.candidate_value("content", v)?),
        };
        let bad_queries = r.candidates("bad_queries")?;
        if bad_queries.is_empty() {
            return Err(r.err("bad_queries", "must contain at least one candidate"));
        }
        items.push(McItem {
            content,
            best_query: r.candidate("best_query")?,
            good_queries: r.candidates("good_queries")?,
            bad_queries,
        });
    }
    let included = items.iter().filter(|i| i.best_in_good()).count();
    let convention = match included {
        _ if items.is_empty() => GoodSetConvention::Empty,
        n if n == items.len() => GoodSetConvention::BestIncluded,
        0 => GoodSetConvention::BestSeparate,
        _ => GoodSetConvention::Mixed,
    };
    Ok(McDataset { items, convention })
}

/// Reads `{context, question, answers}` records.
pub fn load_qa(text: &str) -> Result<Vec<QaItem>> {
    records(text)?
        .into_iter()
        .map(|r| {
            let context = r.string("context")?;
            let answers: Vec<String> = r
                .get("answers")?
                .as_array()
                .and_then(|a| a.iter().map(|v| v.as_str().map(str::to_string)).collect())
                .ok_or_else(|| r.err("answers", "expected an array of strings"))?;
            if answers.is_empty() {
                return Err(r.err("answers", "must contain at least one gold answer"));
            }
            Ok(QaItem {
                length_class: LengthClass::of(&context),
                question: r.string("question")?,
                context,
                answers,
            })
        })
        .collect()
}

/// Reads `{prediction}` records, one per QA item in the same order.
pub fn load_predictions(text: &str) -> Result<Vec<String>> {
    records(text)?.iter().map(|r| r.string("prediction")).collect()
}

/// Reads `{prefix, completions, correct_index}` records.
pub fn load_factor(text: &str) -> Result<Vec<FactorItem>> {
    records(text)?
        .into_iter()
        .map(|r| {
            let completions = r.candidates("completions")?;
            if completions.len() < 2 {
                return Err(r.err(
                    "completions",
                    "need the correct completion and at least one distractor",
                ));
            }
            let correct_index = r
                .get("correct_index")?
                .as_u64()
                .map(|i| i as usize)
                .filter(|&i| i < completions.len())
                .ok_or_else(|| {
                    r.err(
                        "correct_index",
                        format!("expected an index below {}", completions.len()),
                    )
                })?;
            Ok(FactorItem {
                prefix: r.candidate("prefix")?,
                completions,
                correct_index,
            })
        })
        .collect()
}
