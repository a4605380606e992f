//! Model access: a single [`Backend`] trait covering text-only (black-box)
//! and log-probability-capable (white-box) models, plus embedders.

mod embed;
mod http;
mod parse;
mod scripted;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::promptgen::{PromptVariant, RenderedPrompt};

pub use embed::{Embedder, HttpEmbedder, ScriptedEmbedder};
pub use http::{HttpBackend, HttpConfig};
pub use parse::parse_response;
pub use scripted::{LogprobEntry, ScenarioEntry, ScenarioVariant, ScriptedBackend};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Answer {
    Yes,
    No,
    Unparsed,
}

impl Answer {
    /// Yes -> 1, No -> 0.
    pub fn label(self) -> Option<u8> {
        match self {
            Answer::Yes => Some(1),
            Answer::No => Some(0),
            Answer::Unparsed => None,
        }
    }

    pub fn from_label(label: u8) -> Answer {
        if label == 1 {
            Answer::Yes
        } else {
            Answer::No
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Answer::Yes => "Yes",
            Answer::No => "No",
            Answer::Unparsed => "Unparsed",
        }
    }
}

impl fmt::Display for Answer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    /// Generated text only; confidence comes from a self-reported rating.
    BlackBox,
    /// Token log-probabilities are available.
    WhiteBox,
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendKind::BlackBox => "black-box",
            BackendKind::WhiteBox => "white-box",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResponse {
    pub raw_text: String,
    pub answer: Answer,
    /// Self-reported rating in `[0, 100]`.
    pub toxicity_rating: Option<u8>,
    pub rationale: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_token_logprobs: Option<Vec<TokenLogprob>>,
}

/// One request against a backend. The statement id and the prompt's
/// variant/category travel with the text so scripted backends can key on them.
#[derive(Debug, Clone, Copy)]
pub struct Call<'a> {
    pub statement_id: &'a str,
    pub prompt: &'a RenderedPrompt,
}

impl<'a> Call<'a> {
    pub fn new(statement_id: &'a str, prompt: &'a RenderedPrompt) -> Self {
        Call { statement_id, prompt }
    }

    pub fn variant(&self) -> PromptVariant {
        self.prompt.variant
    }
}

/// Log-probability of a continuation together with the number of tokens it
/// was scored over.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContinuationScore {
    pub logprob: f64,
    pub tokens: usize,
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("request timed out after {0:?}")]
    Timeout(std::time::Duration),
    #[error("no scripted reply for statement {statement_id:?}, context {category:?}, variant {variant}")]
    ScenarioMiss { statement_id: String, category: String, variant: ScenarioVariant },
    #[error("no scripted log-probability for continuation {continuation:?} (statement {statement_id:?}, context {category:?})")]
    LogprobMiss { statement_id: String, category: String, continuation: String },
    #[error("operation not supported by a {0} backend")]
    Unsupported(BackendKind),
    #[error("unexpected response from endpoint: {0}")]
    Protocol(String),
}

pub trait Backend: Send + Sync {
    fn kind(&self) -> BackendKind;

    fn complete(&self, call: &Call<'_>) -> Result<ModelResponse, BackendError>;

    /// Scores `continuation` as if appended to the call's prompt.
    fn score_continuation(
        &self,
        call: &Call<'_>,
        continuation: &str,
    ) -> Result<ContinuationScore, BackendError>;

    /// `log Pr[continuation | prompt]`, summed over continuation tokens.
    fn sequence_logprob(&self, call: &Call<'_>, continuation: &str) -> Result<f64, BackendError> {
        if self.kind() != BackendKind::WhiteBox {
            return Err(BackendError::Unsupported(self.kind()));
        }
        if continuation.is_empty() {
            return Ok(0.0);
        }
        Ok(self.score_continuation(call, continuation)?.logprob)
    }
}

impl<B: Backend + ?Sized> Backend for &B {
    fn kind(&self) -> BackendKind {
        (**self).kind()
    }
    fn complete(&self, call: &Call<'_>) -> Result<ModelResponse, BackendError> {
        (**self).complete(call)
    }
    fn score_continuation(
        &self,
        call: &Call<'_>,
        continuation: &str,
    ) -> Result<ContinuationScore, BackendError> {
        (**self).score_continuation(call, continuation)
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn kind(&self) -> BackendKind {
        (**self).kind()
    }
    fn complete(&self, call: &Call<'_>) -> Result<ModelResponse, BackendError> {
        (**self).complete(call)
    }
    fn score_continuation(
        &self,
        call: &Call<'_>,
        continuation: &str,
    ) -> Result<ContinuationScore, BackendError> {
        (**self).score_continuation(call, continuation)
    }
}

impl<B: Backend + ?Sized> Backend for std::sync::Arc<B> {
    fn kind(&self) -> BackendKind {
        (**self).kind()
    }
    fn complete(&self, call: &Call<'_>) -> Result<ModelResponse, BackendError> {
        (**self).complete(call)
    }
    fn score_continuation(
        &self,
        call: &Call<'_>,
        continuation: &str,
    ) -> Result<ContinuationScore, BackendError> {
        (**self).score_continuation(call, continuation)
    }
}

/// Whitespace token count, used wherever a backend does not report its own.
pub fn whitespace_tokens(text: &str) -> usize {
    text.split_whitespace().count()
}
