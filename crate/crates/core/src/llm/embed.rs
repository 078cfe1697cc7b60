use std::time::Duration;

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::http::{post_with_retry, RetryPolicy, API_KEY_ENV, BASE_URL_ENV, DEFAULT_BASE_URL};
use super::LlmError;

pub trait Embedder: Send + Sync {
    /// One unit-norm vector per input text.
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, LlmError>;
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in &mut v {
            *x /= norm;
        }
    }
    v
}

/// Offline embedder: signed feature hashing of lowercase word tokens.
///
/// Texts without any word token fall back to a vector derived from the hash
/// of the whole text, so every output has unit norm.
#[derive(Debug, Clone, Copy)]
pub struct HashEmbedder {
    pub dim: usize,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self { dim: 256 }
    }
}

impl HashEmbedder {
    fn vector(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        let lower = text.to_lowercase();
        let mut any = false;
        for token in lower.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
            let h = Sha256::digest(token.as_bytes());
            let idx = u64::from_le_bytes(h[..8].try_into().unwrap()) as usize % self.dim;
            let sign = if h[8] & 1 == 0 { 1.0 } else { -1.0 };
            v[idx] += sign;
            any = true;
        }
        if !any || v.iter().all(|x| *x == 0.0) {
            let mut seed = Sha256::digest(text.as_bytes()).to_vec();
            for (i, x) in v.iter_mut().enumerate() {
                if i % 32 == 0 && i > 0 {
                    seed = Sha256::digest(&seed).to_vec();
                }
                *x = seed[i % 32] as f64 - 127.5;
            }
        }
        normalize(v)
    }
}

impl Embedder for HashEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, LlmError> {
        Ok(texts.iter().map(|t| self.vector(t)).collect())
    }
}

/// Live embedder for the common `/embeddings` endpoint.
pub struct HttpEmbedder {
    base_url: String,
    api_key: String,
    model: String,
    retry: RetryPolicy,
    agent: ureq::Agent,
}

impl HttpEmbedder {
    pub fn new(base_url: impl Into<String>, api_key: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key: api_key.into(),
            model: model.into(),
            retry: RetryPolicy::default(),
            agent: ureq::AgentBuilder::new().timeout(Duration::from_secs(120)).build(),
        }
    }

    pub fn from_env(model: impl Into<String>) -> Result<Self, LlmError> {
        let key = std::env::var(API_KEY_ENV).map_err(|_| LlmError::Transport {
            attempts: 0,
            message: format!("{API_KEY_ENV} is not set"),
        })?;
        let base = std::env::var(BASE_URL_ENV).unwrap_or_else(|_| DEFAULT_BASE_URL.to_string());
        Ok(Self::new(base, key, model))
    }
}

pub(crate) fn parse_embeddings(reply: &Value, expected: usize) -> Result<Vec<Vec<f64>>, LlmError> {
    let data = reply
        .get("data")
        .and_then(Value::as_array)
        .ok_or_else(|| LlmError::BadResponse("missing `data` array".into()))?;
    if data.len() != expected {
        return Err(LlmError::BadResponse(format!("expected {expected} embeddings, got {}", data.len())));
    }
    let mut out = Vec::with_capacity(data.len());
    let mut dim = None;
    for item in data {
        let v: Vec<f64> = item
            .get("embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| LlmError::BadResponse("missing `embedding`".into()))?
            .iter()
            .map(|x| x.as_f64().ok_or_else(|| LlmError::BadResponse("non-numeric embedding".into())))
            .collect::<Result<_, _>>()?;
        match dim {
            None => dim = Some(v.len()),
            Some(d) if d != v.len() => {
                return Err(LlmError::DimensionMismatch {
                    expected: d,
                    got: v.len(),
                })
            }
            _ => {}
        }
        out.push(normalize(v));
    }
    Ok(out)
}

impl Embedder for HttpEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, LlmError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let body = json!({ "model": self.model, "input": texts });
        let url = format!("{}/embeddings", self.base_url);
        let reply = post_with_retry(&self.agent, &url, &self.api_key, &body, self.retry)?;
        parse_embeddings(&reply, texts.len())
    }
}
