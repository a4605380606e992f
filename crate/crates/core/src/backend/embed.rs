use std::time::Duration;

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::http::JsonClient;
use super::BackendError;

pub trait Embedder: Send + Sync {
    fn dimension(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError>;
}

/// Deterministic embedder: signed feature hashing of lowercase words and
/// character trigrams into `dimension` buckets, salted with `seed`.
#[derive(Debug, Clone)]
pub struct ScriptedEmbedder {
    dimension: usize,
    seed: u64,
}

impl ScriptedEmbedder {
    pub fn new(dimension: usize, seed: u64) -> Self {
        assert!(dimension > 0, "embedding dimension must be positive");
        ScriptedEmbedder { dimension, seed }
    }

    fn add_feature(&self, v: &mut [f64], feature: &str, weight: f64) {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(feature.as_bytes());
        let digest = h.finalize();
        let bucket = u64::from_le_bytes(digest[..8].try_into().unwrap()) as usize % self.dimension;
        let sign = if digest[8] & 1 == 0 { 1.0 } else { -1.0 };
        v[bucket] += sign * weight;
    }
}

impl Embedder for ScriptedEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        let mut v = vec![0.0; self.dimension];
        let lower = text.to_lowercase();
        let words: Vec<&str> =
            lower.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).collect();
        if words.is_empty() {
            self.add_feature(&mut v, "\u{0}empty", 1.0);
            return Ok(v);
        }
        for w in &words {
            self.add_feature(&mut v, &format!("w:{w}"), 1.0);
            let chars: Vec<char> = format!(" {w} ").chars().collect();
            for tri in chars.windows(3) {
                let tri: String = tri.iter().collect();
                self.add_feature(&mut v, &format!("t:{tri}"), 0.5);
            }
        }
        if v.iter().all(|x| *x == 0.0) {
            // Every feature cancelled out; keep the vector usable for cosine.
            self.add_feature(&mut v, "\u{0}bias", 1.0);
        }
        Ok(v)
    }
}

/// `POST {base}/embeddings` client.
pub struct HttpEmbedder {
    client: JsonClient,
    model: String,
    dimension: usize,
}

impl HttpEmbedder {
    pub fn new(
        base_url: &str,
        model: &str,
        dimension: usize,
        api_key_env: Option<&str>,
        timeout: Duration,
    ) -> Self {
        HttpEmbedder {
            client: JsonClient::new(base_url, api_key_env, timeout, 4, false),
            model: model.to_string(),
            dimension,
        }
    }
}

impl Embedder for HttpEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        let reply = self.client.post("embeddings", &json!({"model": self.model, "input": text}))?;
        let values = reply
            .pointer("/data/0/embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| BackendError::Protocol("response has no embedding".into()))?;
        let v: Vec<f64> = values.iter().filter_map(Value::as_f64).collect();
        if v.len() != values.len() || v.len() != self.dimension {
            return Err(BackendError::Protocol(format!(
                "expected a {}-dimensional embedding, got {}",
                self.dimension,
                values.len()
            )));
        }
        Ok(v)
    }
}
