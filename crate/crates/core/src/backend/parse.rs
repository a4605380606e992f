use std::sync::LazyLock;

use regex::Regex;

use super::{Answer, BackendKind, ModelResponse};

static ANSWER_LINE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\banswer\s*:\s*[*_]*\s*(yes|no)\b").unwrap());

static LEADING_ANSWER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)^\s*[*_]*(yes|no)\b[*_]*[\s,.:;!\-]*").unwrap());

// Accepts "level: n/100", "Level: n / 100" and "level n/100".
static RATING: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\blevel\s*:?\s*(\d{1,3})\s*/\s*100\b").unwrap());

static RATIONALE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\brationale\s*:\s*").unwrap());

fn answer_from(token: &str) -> Answer {
    if token.eq_ignore_ascii_case("yes") {
        Answer::Yes
    } else {
        Answer::No
    }
}

fn rating(raw: &str) -> Option<u8> {
    RATING.captures(raw).and_then(|c| c[1].parse::<u8>().ok()).filter(|&n| n <= 100)
}

fn after_rationale_marker(raw: &str) -> Option<String> {
    RATIONALE.find(raw).map(|m| raw[m.end()..].trim().to_string())
}

/// Extracts answer, rating and rationale from raw model text. Never fails:
/// anything that cannot be read degrades to `Unparsed` or an absent field.
pub fn parse_response(raw_text: &str, kind: BackendKind) -> ModelResponse {
    let mut answer = Answer::Unparsed;
    let mut rationale = after_rationale_marker(raw_text);

    if kind == BackendKind::WhiteBox {
        if let Some(caps) = LEADING_ANSWER.captures(raw_text) {
            answer = answer_from(&caps[1]);
            if rationale.is_none() {
                let rest = &raw_text[caps.get(0).unwrap().end()..];
                rationale = Some(rest.trim().to_string());
            }
        }
    }
    if answer == Answer::Unparsed {
        if let Some(caps) = ANSWER_LINE.captures(raw_text) {
            answer = answer_from(&caps[1]);
        }
    }

    ModelResponse {
        raw_text: raw_text.to_string(),
        answer,
        toxicity_rating: rating(raw_text),
        rationale: rationale.unwrap_or_default(),
        answer_token_logprobs: None,
    }
}
