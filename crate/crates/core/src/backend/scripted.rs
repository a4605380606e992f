//! Offline backend replaying canned replies from a scenario file.
//!
//! Replies are keyed on `(statement id, context category, variant)` instead
//! of the full prompt bytes, so template whitespace edits do not invalidate
//! recorded scenarios.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    parse_response, whitespace_tokens, Backend, BackendError, BackendKind, Call, ContinuationScore,
    ModelResponse,
};
use crate::promptgen::PromptVariant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioVariant {
    Detect,
    Classify,
}

impl From<PromptVariant> for ScenarioVariant {
    fn from(v: PromptVariant) -> Self {
        match v {
            PromptVariant::DetectBlackBox | PromptVariant::DetectWhiteBox => ScenarioVariant::Detect,
            PromptVariant::Classify => ScenarioVariant::Classify,
        }
    }
}

impl fmt::Display for ScenarioVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScenarioVariant::Detect => "detect",
            ScenarioVariant::Classify => "classify",
        })
    }
}

/// A stored log-probability: either a bare number (token count then falls
/// back to whitespace splitting) or an explicit `{logprob, tokens}` pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LogprobEntry {
    Value(f64),
    Scored { logprob: f64, tokens: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioEntry {
    pub statement_id: String,
    pub context_category: String,
    pub variant: ScenarioVariant,
    pub reply_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprob_table: Option<BTreeMap<String, LogprobEntry>>,
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("failed to read scenario file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed scenario file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("duplicate scenario entry for statement {0:?}, context {1:?}, variant {2}")]
    Duplicate(String, String, ScenarioVariant),
}

type Key = (String, String, ScenarioVariant);

#[derive(Debug, Clone)]
pub struct ScriptedBackend {
    kind: BackendKind,
    entries: HashMap<Key, ScenarioEntry>,
}

fn key(statement_id: &str, category: &str, variant: ScenarioVariant) -> Key {
    (statement_id.to_string(), category.trim().to_lowercase(), variant)
}

impl ScriptedBackend {
    pub fn new(
        kind: BackendKind,
        entries: impl IntoIterator<Item = ScenarioEntry>,
    ) -> Result<Self, ScenarioError> {
        let mut map = HashMap::new();
        for entry in entries {
            let k = key(&entry.statement_id, &entry.context_category, entry.variant);
            if map.contains_key(&k) {
                return Err(ScenarioError::Duplicate(
                    entry.statement_id,
                    entry.context_category,
                    entry.variant,
                ));
            }
            map.insert(k, entry);
        }
        Ok(ScriptedBackend { kind, entries: map })
    }

    pub fn from_json_str(kind: BackendKind, text: &str) -> Result<Self, ScenarioError> {
        let entries: Vec<ScenarioEntry> = serde_json::from_str(text)?;
        Self::new(kind, entries)
    }

    pub fn load_path(kind: BackendKind, path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|source| ScenarioError::Io { path: path.display().to_string(), source })?;
        Self::from_json_str(kind, &text)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn entry(&self, call: &Call<'_>) -> Result<&ScenarioEntry, BackendError> {
        let variant = ScenarioVariant::from(call.variant());
        self.entries.get(&key(call.statement_id, &call.prompt.context_category, variant)).ok_or_else(|| {
            BackendError::ScenarioMiss {
                statement_id: call.statement_id.to_string(),
                category: call.prompt.context_category.clone(),
                variant,
            }
        })
    }
}

impl Backend for ScriptedBackend {
    fn kind(&self) -> BackendKind {
        self.kind
    }

    fn complete(&self, call: &Call<'_>) -> Result<ModelResponse, BackendError> {
        let entry = self.entry(call)?;
        Ok(parse_response(&entry.reply_text, self.kind))
    }

    fn score_continuation(
        &self,
        call: &Call<'_>,
        continuation: &str,
    ) -> Result<ContinuationScore, BackendError> {
        if self.kind != BackendKind::WhiteBox {
            return Err(BackendError::Unsupported(self.kind));
        }
        let entry = self.entry(call)?;
        let stored = entry.logprob_table.as_ref().and_then(|t| t.get(continuation)).ok_or_else(|| {
            BackendError::LogprobMiss {
                statement_id: call.statement_id.to_string(),
                category: call.prompt.context_category.clone(),
                continuation: continuation.to_string(),
            }
        })?;
        Ok(match *stored {
            LogprobEntry::Value(logprob) => {
                ContinuationScore { logprob, tokens: whitespace_tokens(continuation) }
            }
            LogprobEntry::Scored { logprob, tokens } => ContinuationScore { logprob, tokens },
        })
    }
}
