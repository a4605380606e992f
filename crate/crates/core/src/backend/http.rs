//! OpenAI-compatible HTTP backend.
//!
//! Detection and classification go through `POST {base}/chat/completions`
//! (with `logprobs: true` for white-box models). Continuation scoring uses the
//! legacy `POST {base}/completions` endpoint with `echo: true`, which most
//! self-hosted servers still expose, and sums the echoed token log-probs that
//! fall inside the continuation.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde_json::{json, Value};

use super::{
    parse_response, Backend, BackendError, BackendKind, Call, ContinuationScore, ModelResponse, TokenLogprob,
};

#[derive(Debug, Clone)]
pub struct HttpConfig {
    pub base_url: String,
    pub model: String,
    pub kind: BackendKind,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: Option<String>,
    pub timeout: Duration,
    pub max_in_flight: usize,
    pub temperature: f64,
    pub max_tokens: u32,
    pub trace: bool,
}

impl HttpConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>, kind: BackendKind) -> Self {
        HttpConfig {
            base_url: base_url.into(),
            model: model.into(),
            kind,
            api_key_env: Some("DTOT_API_KEY".into()),
            timeout: Duration::from_secs(60),
            max_in_flight: 4,
            temperature: 0.0,
            max_tokens: 256,
            trace: false,
        }
    }
}

struct Permits {
    available: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a Permits);

impl Permits {
    fn new(n: usize) -> Self {
        Permits { available: Mutex::new(n.max(1)), freed: Condvar::new() }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.available.lock().unwrap();
        while *n == 0 {
            n = self.freed.wait(n).unwrap();
        }
        *n -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.available.lock().unwrap() += 1;
        self.0.freed.notify_one();
    }
}

/// Blocking JSON-over-HTTP client with an in-flight limit.
pub(crate) struct JsonClient {
    base_url: String,
    api_key: Option<String>,
    timeout: Duration,
    trace: bool,
    agent: ureq::Agent,
    permits: Permits,
}

impl JsonClient {
    pub(crate) fn new(
        base_url: &str,
        api_key_env: Option<&str>,
        timeout: Duration,
        max_in_flight: usize,
        trace: bool,
    ) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        JsonClient {
            base_url: base_url.trim_end_matches('/').to_string(),
            api_key: api_key_env.and_then(|var| std::env::var(var).ok()),
            timeout,
            trace,
            agent,
            permits: Permits::new(max_in_flight),
        }
    }

    pub(crate) fn post(&self, path: &str, body: &Value) -> Result<Value, BackendError> {
        let url = format!("{}/{}", self.base_url, path.trim_start_matches('/'));
        if self.trace {
            // Authorization header is never logged.
            log::info!("POST {url} {body}");
        }
        let _permit = self.permits.acquire();
        let mut request = self.agent.post(&url);
        if let Some(key) = &self.api_key {
            request = request.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = request.send_json(body).map_err(|e| match e {
            ureq::Error::Timeout(_) => BackendError::Timeout(self.timeout),
            other => BackendError::Transport(other.to_string()),
        })?;
        let status = response.status();
        let text =
            response.body_mut().read_to_string().map_err(|e| BackendError::Transport(e.to_string()))?;
        if self.trace {
            log::info!("{status} {url} {text}");
        }
        if !status.is_success() {
            return Err(BackendError::Transport(format!(
                "{url} returned {status}: {}",
                text.chars().take(300).collect::<String>()
            )));
        }
        serde_json::from_str(&text).map_err(|e| BackendError::Protocol(e.to_string()))
    }
}

pub struct HttpBackend {
    config: HttpConfig,
    client: JsonClient,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Self {
        let client = JsonClient::new(
            &config.base_url,
            config.api_key_env.as_deref(),
            config.timeout,
            config.max_in_flight,
            config.trace,
        );
        HttpBackend { config, client }
    }

    pub fn config(&self) -> &HttpConfig {
        &self.config
    }
}

fn chat_logprobs(choice: &Value) -> Option<Vec<TokenLogprob>> {
    let content = choice.pointer("/logprobs/content")?.as_array()?;
    Some(
        content
            .iter()
            .filter_map(|t| {
                Some(TokenLogprob {
                    token: t.get("token")?.as_str()?.to_string(),
                    logprob: t.get("logprob")?.as_f64()?,
                })
            })
            .collect(),
    )
}

/// Sums echoed token log-probs whose character offset lies in `[start, end)`.
fn sum_echoed(choice: &Value, start: usize, end: usize) -> Result<ContinuationScore, BackendError> {
    let missing = || BackendError::Protocol("completion lacks echoed logprobs".into());
    let logprobs = choice.get("logprobs").ok_or_else(missing)?;
    let offsets = logprobs.get("text_offset").and_then(Value::as_array).ok_or_else(missing)?;
    let values = logprobs.get("token_logprobs").and_then(Value::as_array).ok_or_else(missing)?;
    let mut logprob = 0.0;
    let mut tokens = 0;
    for (offset, value) in offsets.iter().zip(values) {
        let Some(offset) = offset.as_u64().map(|o| o as usize) else {
            continue;
        };
        if offset < start || offset >= end {
            continue;
        }
        let lp = value
            .as_f64()
            .ok_or_else(|| BackendError::Protocol("null logprob inside continuation".into()))?;
        logprob += lp;
        tokens += 1;
    }
    if tokens == 0 {
        return Err(BackendError::Protocol("no echoed tokens fall inside the continuation".into()));
    }
    Ok(ContinuationScore { logprob, tokens })
}

impl Backend for HttpBackend {
    fn kind(&self) -> BackendKind {
        self.config.kind
    }

    fn complete(&self, call: &Call<'_>) -> Result<ModelResponse, BackendError> {
        let white_box = self.config.kind == BackendKind::WhiteBox;
        let body = json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": call.prompt.text}],
            "temperature": self.config.temperature,
            "max_tokens": self.config.max_tokens,
            "logprobs": white_box,
        });
        let reply = self.client.post("chat/completions", &body)?;
        let choice = reply
            .pointer("/choices/0")
            .ok_or_else(|| BackendError::Protocol("response has no choices".into()))?;
        let text = choice
            .pointer("/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| BackendError::Protocol("choice has no message content".into()))?;
        let mut response = parse_response(text, self.config.kind);
        if white_box {
            response.answer_token_logprobs = chat_logprobs(choice);
        }
        Ok(response)
    }

    fn score_continuation(
        &self,
        call: &Call<'_>,
        continuation: &str,
    ) -> Result<ContinuationScore, BackendError> {
        if self.config.kind != BackendKind::WhiteBox {
            return Err(BackendError::Unsupported(self.config.kind));
        }
        let prompt = &call.prompt.text;
        let joiner = if prompt.ends_with(char::is_whitespace) { "" } else { " " };
        let full = format!("{prompt}{joiner}{continuation}");
        // the joining space usually belongs to the first continuation token
        let start = prompt.chars().count();
        let end = full.chars().count();
        let body = json!({
            "model": self.config.model,
            "prompt": full,
            "max_tokens": 1,
            "temperature": 0.0,
            "echo": true,
            "logprobs": 0,
        });
        let reply = self.client.post("completions", &body)?;
        let choice = reply
            .pointer("/choices/0")
            .ok_or_else(|| BackendError::Protocol("response has no choices".into()))?;
        sum_echoed(choice, start, end)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echoed_window_sum() {
        // "ab" + " cd": prompt tokens at 0, continuation tokens at 2 and 3, generated token at 5.
        let choice = json!({"logprobs": {
            "text_offset": [0, 2, 3, 5],
            "token_logprobs": [null, -0.5, -0.25, -9.0]
        }});
        let s = sum_echoed(&choice, 2, 5).unwrap();
        assert_eq!(s.tokens, 2);
        assert!((s.logprob + 0.75).abs() < 1e-12);
    }

    #[test]
    fn chat_logprobs_extraction() {
        let choice = json!({"logprobs": {"content": [
            {"token": "Yes", "logprob": -0.1},
            {"token": ",", "logprob": -0.2}
        ]}});
        let lp = chat_logprobs(&choice).unwrap();
        assert_eq!(lp.len(), 2);
        assert_eq!(lp[0].token, "Yes");
    }

    #[test]
    fn permits_bound_in_flight() {
        let permits = Permits::new(2);
        let a = permits.acquire();
        let _b = permits.acquire();
        assert_eq!(*permits.available.lock().unwrap(), 0);
        drop(a);
        assert_eq!(*permits.available.lock().unwrap(), 1);
    }
}
