use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::normalize;
use crate::endpoint::{self, RetryPolicy};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbedInput<'a> {
    Text(&'a str),
    /// An image reference (URI or path); the endpoint resolves it.
    Image(&'a str),
}

impl EmbedInput<'_> {
    /// JSON value for the `input` field of an embeddings request.
    pub fn to_wire(&self) -> Value {
        match self {
            EmbedInput::Text(t) => Value::String((*t).to_string()),
            EmbedInput::Image(r) => json!({ "image": r }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub vector: Vec<f32>,
    pub tokens: u64,
}

/// A frozen image/text encoder.
pub trait Embedder: Send + Sync {
    fn embed(&self, input: EmbedInput<'_>) -> Result<Embedding>;

    fn model(&self) -> &str {
        "unknown"
    }
}

impl<E: Embedder + ?Sized> Embedder for &E {
    fn embed(&self, input: EmbedInput<'_>) -> Result<Embedding> {
        (**self).embed(input)
    }

    fn model(&self) -> &str {
        (**self).model()
    }
}

impl<E: Embedder + ?Sized> Embedder for Arc<E> {
    fn embed(&self, input: EmbedInput<'_>) -> Result<Embedding> {
        (**self).embed(input)
    }

    fn model(&self) -> &str {
        (**self).model()
    }
}

/// Embeddings endpoint speaking `{input, model}` → `{embedding, usage: {tokens}}`.
/// The list-shaped `{data: [{embedding}]}` response is accepted as well.
pub struct HttpEmbedder {
    url: String,
    model: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpEmbedder {
    pub fn new(base_url: &str, model: impl Into<String>, api_key: Option<String>) -> Self {
        HttpEmbedder {
            url: format!("{}/v1/embeddings", base_url.trim_end_matches('/')),
            model: model.into(),
            api_key,
            agent: endpoint::agent(Duration::from_secs(60)),
        }
    }

    pub fn from_env(model: impl Into<String>) -> Result<Self> {
        let url = std::env::var(endpoint::ENV_EMBED_URL)
            .map_err(|_| Error::invalid(format!("{} is not set", endpoint::ENV_EMBED_URL)))?;
        Ok(Self::new(&url, model, std::env::var(endpoint::ENV_EMBED_KEY).ok()))
    }
}

pub(crate) fn parse_embedding_response(body: &Value) -> Result<Embedding> {
    let arr = body
        .get("embedding")
        .or_else(|| body.pointer("/data/0/embedding"))
        .and_then(Value::as_array)
        .ok_or_else(|| Error::request("response has no embedding array", false))?;
    let vector = arr
        .iter()
        .map(|x| x.as_f64().map(|f| f as f32))
        .collect::<Option<Vec<f32>>>()
        .ok_or_else(|| Error::request("embedding contains a non-number", false))?;
    let usage = body.get("usage");
    let tokens = usage
        .and_then(|u| u.get("tokens").or_else(|| u.get("total_tokens")))
        .and_then(Value::as_u64)
        .unwrap_or(0);
    Ok(Embedding { vector, tokens })
}

impl Embedder for HttpEmbedder {
    fn embed(&self, input: EmbedInput<'_>) -> Result<Embedding> {
        let mut req = self.agent.post(&self.url);
        if let Some(key) = &self.api_key {
            req = req.set("Authorization", &format!("Bearer {key}"));
        }
        let resp = req
            .send_json(json!({ "input": input.to_wire(), "model": self.model }))
            .map_err(endpoint::classify_http_error)?;
        let body: Value = resp
            .into_json()
            .map_err(|e| Error::request(format!("bad response body: {e}"), true))?;
        parse_embedding_response(&body)
    }

    fn model(&self) -> &str {
        &self.model
    }
}

/// Per-run text embedding memo, keyed by a SHA-256 of the text.
///
/// Used for counterfactual captions: they are query-specific and never go
/// into the corpus cache, but repeated captions should not be re-billed.
pub struct TextEmbeddings<'a> {
    client: &'a dyn Embedder,
    retry: RetryPolicy,
    dim: Option<usize>,
    memo: Mutex<HashMap<[u8; 32], Arc<[f32]>>>,
    stats: Mutex<(u64, u64)>,
}

impl<'a> TextEmbeddings<'a> {
    pub fn new(client: &'a dyn Embedder, dim: Option<usize>, retry: RetryPolicy) -> Self {
        TextEmbeddings {
            client,
            retry,
            dim,
            memo: Mutex::new(HashMap::new()),
            stats: Mutex::new((0, 0)),
        }
    }

    pub fn embed_text(&self, text: &str) -> Result<Arc<[f32]>> {
        if text.trim().is_empty() {
            return Err(Error::invalid("cannot embed empty text"));
        }
        let key: [u8; 32] = Sha256::digest(text.as_bytes()).into();
        if let Some(v) = self.memo.lock().unwrap().get(&key) {
            return Ok(Arc::clone(v));
        }
        let emb = self.retry.run(|| self.client.embed(EmbedInput::Text(text)))?;
        if let Some(d) = self.dim {
            if emb.vector.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: emb.vector.len(),
                });
            }
        }
        let v: Arc<[f32]> = normalize(&emb.vector)?.into();
        {
            let mut stats = self.stats.lock().unwrap();
            stats.0 += 1;
            stats.1 += emb.tokens;
        }
        // Another thread may have raced us here; keep whichever landed first.
        let mut memo = self.memo.lock().unwrap();
        Ok(Arc::clone(memo.entry(key).or_insert(v)))
    }

    /// (endpoint calls, tokens billed) so far.
    pub fn stats(&self) -> (u64, u64) {
        *self.stats.lock().unwrap()
    }
}
