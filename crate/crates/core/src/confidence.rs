//! Confidence checker.
//!
//! Black-box models are scored by an indicator on their self-reported rating:
//! the answer counts as confident when the rating falls outside the open
//! interval `(s_low, s_high)`. White-box models are scored by the probability
//! of the emitted answer. The verdict is `Confident` iff `score >= s_delta`.
//!
//! With a black-box backend the score is always 0 or 1, so any `s_delta` in
//! `(0, 1]` yields the same verdicts.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Answer, BackendKind, ModelResponse};

#[derive(Debug, Error, PartialEq)]
pub enum ConfidenceError {
    #[error("confidence score {0} is outside [0, 1]")]
    Domain(f64),
    #[error("invalid confidence thresholds: {0}")]
    Config(String),
}

/// How a white-box answer probability is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnswerProbability {
    /// `exp(L_a) / (exp(L_yes) + exp(L_no))` over the two verbalizers.
    #[default]
    Normalized,
    /// Unnormalized probability of the full answer text.
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceConfig {
    pub s_low: u8,
    pub s_high: u8,
    pub s_delta: f64,
    #[serde(default)]
    pub answer_probability: AnswerProbability,
}

impl Default for ConfidenceConfig {
    fn default() -> Self {
        ConfidenceConfig {
            s_low: 0,
            s_high: 90,
            s_delta: 0.9,
            answer_probability: AnswerProbability::Normalized,
        }
    }
}

impl ConfidenceConfig {
    pub fn validate(&self) -> Result<(), ConfidenceError> {
        if self.s_low >= self.s_high || self.s_high > 100 {
            return Err(ConfidenceError::Config(format!(
                "need 0 <= s_low < s_high <= 100, got s_low={} s_high={}",
                self.s_low, self.s_high
            )));
        }
        if !(0.0..=1.0).contains(&self.s_delta) {
            return Err(ConfidenceError::Config(format!("s_delta must lie in [0, 1], got {}", self.s_delta)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Decision {
    Confident,
    Unconfident,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceVerdict {
    pub score: f64,
    pub decision: Decision,
}

impl ConfidenceVerdict {
    pub fn is_confident(&self) -> bool {
        self.decision == Decision::Confident
    }
}

/// Verbalizer log-probabilities for a white-box step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnswerLogprobs {
    pub yes: f64,
    pub no: f64,
    /// Log-probability of the full answer text, used by [`AnswerProbability::Raw`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub full: Option<f64>,
}

impl AnswerLogprobs {
    /// Probability of `answer` normalized over `{Yes, No}`.
    pub fn normalized(&self, answer: Answer) -> f64 {
        let (own, other) = match answer {
            Answer::Yes => (self.yes, self.no),
            Answer::No => (self.no, self.yes),
            Answer::Unparsed => return 0.0,
        };
        // 1 / (1 + e^(other - own)) avoids overflow for large magnitudes.
        let p = 1.0 / (1.0 + (other - own).exp());
        if p.is_nan() {
            0.0
        } else {
            p
        }
    }
}

fn rating_is_decisive(rating: u8, cfg: &ConfidenceConfig) -> bool {
    !(cfg.s_low < rating && rating < cfg.s_high)
}

pub fn confidence_score(
    response: &ModelResponse,
    kind: BackendKind,
    cfg: &ConfidenceConfig,
    logprobs: Option<&AnswerLogprobs>,
) -> f64 {
    match kind {
        BackendKind::BlackBox => match response.toxicity_rating {
            Some(r) if rating_is_decisive(r, cfg) => 1.0,
            _ => 0.0,
        },
        BackendKind::WhiteBox => {
            let Some(lp) = logprobs else { return 0.0 };
            if response.answer == Answer::Unparsed {
                return 0.0;
            }
            let p = match cfg.answer_probability {
                AnswerProbability::Normalized => lp.normalized(response.answer),
                AnswerProbability::Raw => {
                    let own = match response.answer {
                        Answer::Yes => lp.yes,
                        _ => lp.no,
                    };
                    lp.full.unwrap_or(own).exp()
                }
            };
            if p.is_finite() {
                p.clamp(0.0, 1.0)
            } else {
                0.0
            }
        }
    }
}

pub fn check(score: f64, cfg: &ConfidenceConfig) -> Result<ConfidenceVerdict, ConfidenceError> {
    if !(0.0..=1.0).contains(&score) {
        return Err(ConfidenceError::Domain(score));
    }
    let decision = if score >= cfg.s_delta { Decision::Confident } else { Decision::Unconfident };
    Ok(ConfidenceVerdict { score, decision })
}
