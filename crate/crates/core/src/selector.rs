//! Context selector: scores every child context against the current step's
//! rationale and picks the most relevant one (greedy, one level at a time).
//!
//! Indices are 0-based child positions in file order.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendError, BackendKind, Call, ModelResponse};
use crate::promptgen::{RenderedPrompt, Templates};

#[derive(Debug, Error)]
pub enum SelectorError {
    #[error("cannot select from an empty score list")]
    Empty,
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RelevanceSource {
    BlackBoxClass,
    WhiteBoxLogprob,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceScores {
    pub scores: Vec<f64>,
    pub source: RelevanceSource,
}

impl RelevanceScores {
    pub fn one_hot(len: usize, hot: Option<usize>) -> Self {
        let mut scores = vec![0.0; len];
        if let Some(i) = hot {
            scores[i] = 1.0;
        }
        RelevanceScores { scores, source: RelevanceSource::BlackBoxClass }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRationale {
    pub child_index: usize,
    pub text: String,
}

/// One candidate per child, each mentioning only that child's category.
pub fn candidate_rationales(categories: &[&str]) -> Vec<CandidateRationale> {
    categories
        .iter()
        .enumerate()
        .map(|(child_index, c)| CandidateRationale {
            child_index,
            text: format!("This statement contains {c} content."),
        })
        .collect()
}

/// How white-box candidate likelihoods become scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RelevanceMode {
    /// Mean per-token log-probability.
    #[default]
    LengthNormalized,
    /// Summed log-probability (argmax-equivalent to the raw probability).
    Raw,
}

fn normalize_reply(text: &str) -> String {
    text.trim().trim_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace()).to_lowercase()
}

/// Matches a free-form classification reply to one category: exact
/// (case-insensitive) match first, then a unique category contained in the
/// reply. Anything else is a miss.
pub fn match_category(reply: &str, categories: &[&str]) -> Option<usize> {
    let reply = normalize_reply(reply);
    if reply.is_empty() {
        return None;
    }
    if let Some(i) = categories.iter().position(|c| normalize_reply(c) == reply) {
        return Some(i);
    }
    let mut hits = categories
        .iter()
        .enumerate()
        .filter(|(_, c)| {
            let c = normalize_reply(c);
            !c.is_empty() && reply.contains(&c)
        })
        .map(|(i, _)| i);
    match (hits.next(), hits.next()) {
        (Some(i), None) => Some(i),
        _ => None,
    }
}

/// Asks the model which child category the rationale is most relevant to and
/// returns one-hot scores (all zero when the reply names no single category)
/// together with the classification prompt and reply.
pub fn relevance_blackbox<B: Backend + ?Sized>(
    backend: &B,
    templates: &Templates,
    statement_id: &str,
    rationale: &str,
    categories: &[&str],
    context_category: &str,
) -> Result<(RelevanceScores, RenderedPrompt, ModelResponse), SelectorError> {
    let prompt = templates.render_classification(rationale, categories, context_category);
    let reply = backend.complete(&Call::new(statement_id, &prompt))?;
    let hot = match_category(&reply.raw_text, categories);
    Ok((RelevanceScores::one_hot(categories.len(), hot), prompt, reply))
}

/// Scores each candidate rationale by its likelihood given the detection
/// prompt of the current step.
pub fn relevance_whitebox<B: Backend + ?Sized>(
    backend: &B,
    call: &Call<'_>,
    candidates: &[CandidateRationale],
    mode: RelevanceMode,
) -> Result<RelevanceScores, SelectorError> {
    if backend.kind() != BackendKind::WhiteBox {
        return Err(BackendError::Unsupported(backend.kind()).into());
    }
    let mut scores = Vec::with_capacity(candidates.len());
    for c in candidates {
        let s = backend.score_continuation(call, &c.text)?;
        scores.push(match mode {
            RelevanceMode::LengthNormalized => s.logprob / s.tokens.max(1) as f64,
            RelevanceMode::Raw => s.logprob,
        });
    }
    Ok(RelevanceScores { scores, source: RelevanceSource::WhiteBoxLogprob })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    pub index: usize,
    /// Set when a black-box classification matched no child and the first
    /// child was taken by default.
    pub fallback: bool,
}

/// Argmax with ties going to the lowest index. NaN scores never win.
pub fn select(scores: &RelevanceScores) -> Result<Selection, SelectorError> {
    if scores.scores.is_empty() {
        return Err(SelectorError::Empty);
    }
    let mut best = 0;
    for (i, &s) in scores.scores.iter().enumerate().skip(1) {
        let current = scores.scores[best];
        if s > current || (current.is_nan() && !s.is_nan()) {
            best = i;
        }
    }
    let fallback = scores.source == RelevanceSource::BlackBoxClass && scores.scores.iter().all(|&s| s == 0.0);
    Ok(Selection { index: best, fallback })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{ScenarioEntry, ScenarioVariant, ScriptedBackend};
    use crate::promptgen::{PromptVariant, RenderedPrompt};
    use proptest::prelude::*;

    fn white(scores: Vec<f64>) -> RelevanceScores {
        RelevanceScores { scores, source: RelevanceSource::WhiteBoxLogprob }
    }

    const DEFAULTS: [&str; 5] = ["hate speech", "biased", "sexual", "violent", "bullying"];

    fn classify_backend(reply: &str) -> ScriptedBackend {
        ScriptedBackend::new(
            BackendKind::BlackBox,
            [ScenarioEntry {
                statement_id: "s".into(),
                context_category: "toxic".into(),
                variant: ScenarioVariant::Classify,
                reply_text: reply.into(),
                logprob_table: None,
            }],
        )
        .unwrap()
    }

    #[test]
    fn argmax_examples() {
        assert_eq!(select(&white(vec![0.2, 0.7, 0.1])).unwrap().index, 1);
        assert_eq!(select(&white(vec![0.5, 0.5])).unwrap().index, 0);
        let hot = RelevanceScores::one_hot(5, Some(2));
        assert_eq!(select(&hot).unwrap().index, 2);
        assert!(!select(&hot).unwrap().fallback);
    }

    #[test]
    fn empty_scores_error() {
        assert!(matches!(select(&white(vec![])), Err(SelectorError::Empty)));
    }

    #[test]
    fn all_zero_one_hot_falls_back_with_flag() {
        let s = select(&RelevanceScores::one_hot(5, None)).unwrap();
        assert_eq!(s, Selection { index: 0, fallback: true });
    }

    #[test]
    fn nan_never_wins() {
        assert_eq!(select(&white(vec![f64::NAN, -3.0])).unwrap().index, 1);
        assert_eq!(select(&white(vec![-1.0, f64::NAN])).unwrap().index, 0);
    }

    #[test]
    fn blackbox_reply_naming_category() {
        let b = classify_backend("Hate speech");
        let t = Templates::builtin();
        let (scores, prompt, _) =
            relevance_blackbox(&b, &t, "s", "anti-immigrant stereotyping", &DEFAULTS, "toxic").unwrap();
        assert_eq!(scores.scores, vec![1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(prompt.variant, PromptVariant::Classify);
    }

    #[test]
    fn blackbox_reply_matching_nothing() {
        let b = classify_backend("none of these");
        let t = Templates::builtin();
        let (scores, _, _) = relevance_blackbox(&b, &t, "s", "r", &DEFAULTS, "toxic").unwrap();
        assert_eq!(scores.scores, vec![0.0; 5]);
    }

    #[test]
    fn blackbox_single_child() {
        let b = classify_backend("violent");
        let t = Templates::builtin();
        let (scores, _, _) = relevance_blackbox(&b, &t, "s", "r", &["violent"], "toxic").unwrap();
        assert_eq!(scores.scores, vec![1.0]);
    }

    #[test]
    fn reply_matching_rules() {
        assert_eq!(match_category("2. biased.", &DEFAULTS), Some(1));
        assert_eq!(match_category("The answer is: sexual", &DEFAULTS), Some(2));
        assert_eq!(match_category("violent or bullying", &DEFAULTS), None);
        assert_eq!(match_category("", &DEFAULTS), None);
        // Exact match beats a substring hit on a longer reply.
        assert_eq!(match_category("hate", &["hate", "hate speech"]), Some(0));
    }

    fn whitebox_backend(table: &[(&str, f64)]) -> (ScriptedBackend, RenderedPrompt) {
        let entry = ScenarioEntry {
            statement_id: "s".into(),
            context_category: "toxic".into(),
            variant: ScenarioVariant::Detect,
            reply_text: "Yes".into(),
            logprob_table: Some(
                table.iter().map(|(k, v)| (k.to_string(), crate::backend::LogprobEntry::Value(*v))).collect(),
            ),
        };
        let prompt = RenderedPrompt {
            text: "p".into(),
            variant: PromptVariant::DetectWhiteBox,
            context_category: "toxic".into(),
            demo_count: 0,
        };
        (ScriptedBackend::new(BackendKind::WhiteBox, [entry]).unwrap(), prompt)
    }

    #[test]
    fn whitebox_mean_logprob_lookup() {
        let cands = candidate_rationales(&["hate speech", "biased"]);
        // "This statement contains hate speech content." has 6 tokens, the biased one 5.
        let (b, p) = whitebox_backend(&[(&cands[0].text, -12.0), (&cands[1].text, -2.5)]);
        let s = relevance_whitebox(&b, &Call::new("s", &p), &cands, RelevanceMode::LengthNormalized).unwrap();
        assert_eq!(s.scores, vec![-2.0, -0.5]);
        assert_eq!(select(&s).unwrap().index, 1);
        let raw = relevance_whitebox(&b, &Call::new("s", &p), &cands, RelevanceMode::Raw).unwrap();
        assert_eq!(raw.scores, vec![-12.0, -2.5]);
    }

    #[test]
    fn whitebox_identical_candidates_score_identically() {
        let cands = vec![
            CandidateRationale { child_index: 0, text: "same".into() },
            CandidateRationale { child_index: 1, text: "same".into() },
        ];
        let (b, p) = whitebox_backend(&[("same", -1.25)]);
        let s = relevance_whitebox(&b, &Call::new("s", &p), &cands, RelevanceMode::default()).unwrap();
        assert_eq!(s.scores[0], s.scores[1]);
    }

    #[test]
    fn whitebox_on_blackbox_is_unsupported() {
        let b = classify_backend("x");
        let p = RenderedPrompt {
            text: "p".into(),
            variant: PromptVariant::DetectBlackBox,
            context_category: "toxic".into(),
            demo_count: 0,
        };
        let err = relevance_whitebox(
            &b,
            &Call::new("s", &p),
            &candidate_rationales(&["a"]),
            RelevanceMode::default(),
        );
        assert!(matches!(err, Err(SelectorError::Backend(BackendError::Unsupported(_)))));
    }

    proptest! {
        // Integer-valued scores keep the shifted and mapped orderings exact.
        #[test]
        fn argmax_invariant_under_shift_and_monotone_map(
            ints in prop::collection::vec(-50i32..50, 1..10),
            shift in -100i32..100,
        ) {
            let scores: Vec<f64> = ints.iter().map(|&i| i as f64).collect();
            let base = select(&white(scores.clone())).unwrap().index;
            prop_assert!(base < scores.len());
            let shifted: Vec<f64> = scores.iter().map(|s| s + shift as f64).collect();
            prop_assert_eq!(select(&white(shifted)).unwrap().index, base);
            let mapped: Vec<f64> = scores.iter().map(|s| s.atan()).collect();
            prop_assert_eq!(select(&white(mapped)).unwrap().index, base);
        }
    }
}
