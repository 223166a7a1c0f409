//! Chat-model client, answer extraction, voting and token accounting.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::endpoint::{self, RetryPolicy};
use crate::error::{Error, Result};
use crate::prompting::{PromptBundle, Segment};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub temperature: f64,
    pub max_tokens: u32,
    pub num_generations: u32,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            temperature: 0.0,
            max_tokens: 512,
            num_generations: 1,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(Error::invalid("temperature must be >= 0"));
        }
        if self.max_tokens == 0 || self.num_generations == 0 {
            return Err(Error::invalid("max_tokens and num_generations must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    #[serde(default)]
    pub finish_reason: Option<String>,
}

/// A vision-language chat endpoint.
pub trait ChatModel: Send + Sync {
    fn complete(&self, prompt: &PromptBundle, temperature: f64, max_tokens: u32) -> Result<ChatResponse>;

    fn model(&self) -> &str {
        "unknown"
    }
}

impl<M: ChatModel + ?Sized> ChatModel for &M {
    fn complete(&self, prompt: &PromptBundle, temperature: f64, max_tokens: u32) -> Result<ChatResponse> {
        (**self).complete(prompt, temperature, max_tokens)
    }

    fn model(&self) -> &str {
        (**self).model()
    }
}

impl<M: ChatModel + ?Sized> ChatModel for std::sync::Arc<M> {
    fn complete(&self, prompt: &PromptBundle, temperature: f64, max_tokens: u32) -> Result<ChatResponse> {
        (**self).complete(prompt, temperature, max_tokens)
    }

    fn model(&self) -> &str {
        (**self).model()
    }
}

/// Chat-completions `messages` array for a prompt.
pub fn to_messages(prompt: &PromptBundle) -> Value {
    let mut msgs = Vec::new();
    if let Some(sys) = &prompt.system {
        msgs.push(json!({"role": "system", "content": sys}));
    }
    let parts: Vec<Value> = prompt
        .segments
        .iter()
        .map(|s| match s {
            Segment::Text(t) => json!({"type": "text", "text": t}),
            Segment::Image(r) => json!({"type": "image_url", "image_url": {"url": r}}),
        })
        .collect();
    msgs.push(json!({"role": "user", "content": parts}));
    Value::Array(msgs)
}

/// Inverse of [`to_messages`]. String contents become one text segment;
/// assistant turns are rejected since prompts here are single-turn.
pub fn from_messages(messages: &Value) -> Result<PromptBundle> {
    let bad = |m: &str| Error::MalformedRequest(m.to_string());
    let arr = messages.as_array().ok_or_else(|| bad("messages is not an array"))?;
    let mut system = None;
    let mut segments = Vec::new();
    for m in arr {
        let role = m
            .get("role")
            .and_then(Value::as_str)
            .ok_or_else(|| bad("message without role"))?;
        let content = m.get("content").ok_or_else(|| bad("message without content"))?;
        match role {
            "system" => {
                system = Some(
                    content
                        .as_str()
                        .ok_or_else(|| bad("system content must be a string"))?
                        .to_string(),
                )
            }
            "user" => match content {
                Value::String(s) => segments.push(Segment::Text(s.clone())),
                Value::Array(parts) => {
                    for p in parts {
                        match p.get("type").and_then(Value::as_str) {
                            Some("text") => segments.push(Segment::Text(
                                p.get("text")
                                    .and_then(Value::as_str)
                                    .ok_or_else(|| bad("text part without text"))?
                                    .to_string(),
                            )),
                            Some("image_url") => segments.push(Segment::Image(
                                p.pointer("/image_url/url")
                                    .and_then(Value::as_str)
                                    .ok_or_else(|| bad("image part without url"))?
                                    .to_string(),
                            )),
                            _ => return Err(bad("unknown content part")),
                        }
                    }
                }
                _ => return Err(bad("user content must be a string or list")),
            },
            other => return Err(bad(&format!("unsupported role `{other}`"))),
        }
    }
    if segments.is_empty() {
        return Err(bad("no user message"));
    }
    Ok(PromptBundle {
        system,
        segments,
        task_type: String::new(),
    })
}

pub fn parse_chat_response(body: &Value) -> Result<ChatResponse> {
    let choice = body
        .pointer("/choices/0")
        .ok_or_else(|| Error::request("response has no choices", false))?;
    let content = choice
        .pointer("/message/content")
        .ok_or_else(|| Error::request("choice has no message content", false))?;
    let text = match content {
        Value::String(s) => s.clone(),
        Value::Array(parts) => parts
            .iter()
            .filter_map(|p| p.get("text").and_then(Value::as_str))
            .collect::<Vec<_>>()
            .join(""),
        Value::Null => String::new(),
        _ => return Err(Error::request("unexpected content type", false)),
    };
    let usage = |k: &str| {
        body.pointer(&format!("/usage/{k}"))
            .and_then(Value::as_u64)
            .unwrap_or(0)
    };
    Ok(ChatResponse {
        text,
        prompt_tokens: usage("prompt_tokens"),
        completion_tokens: usage("completion_tokens"),
        finish_reason: choice.get("finish_reason").and_then(Value::as_str).map(String::from),
    })
}

/// Client for a `/v1/chat/completions` endpoint.
pub struct HttpChatClient {
    url: String,
    model: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpChatClient {
    pub fn new(base_url: &str, model: impl Into<String>, api_key: Option<String>) -> Self {
        HttpChatClient {
            url: format!("{}/v1/chat/completions", base_url.trim_end_matches('/')),
            model: model.into(),
            api_key,
            agent: endpoint::agent(Duration::from_secs(300)),
        }
    }

    pub fn from_env(model: impl Into<String>) -> Result<Self> {
        let url = std::env::var(endpoint::ENV_CHAT_URL)
            .map_err(|_| Error::invalid(format!("{} is not set", endpoint::ENV_CHAT_URL)))?;
        Ok(Self::new(&url, model, std::env::var(endpoint::ENV_CHAT_KEY).ok()))
    }
}

impl ChatModel for HttpChatClient {
    fn complete(&self, prompt: &PromptBundle, temperature: f64, max_tokens: u32) -> Result<ChatResponse> {
        let mut req = self.agent.post(&self.url);
        if let Some(key) = &self.api_key {
            req = req.set("Authorization", &format!("Bearer {key}"));
        }
        let body = json!({
            "model": self.model,
            "messages": to_messages(prompt),
            "temperature": temperature,
            "max_tokens": max_tokens,
        });
        let resp = req.send_json(body).map_err(endpoint::classify_http_error)?;
        let v: Value = resp
            .into_json()
            .map_err(|e| Error::request(format!("bad response body: {e}"), true))?;
        parse_chat_response(&v)
    }

    fn model(&self) -> &str {
        &self.model
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub calls: u64,
}

impl Usage {
    pub fn of(r: &ChatResponse) -> Self {
        Usage {
            prompt_tokens: r.prompt_tokens,
            completion_tokens: r.completion_tokens,
            calls: 1,
        }
    }

    pub fn add(&mut self, other: Usage) {
        self.prompt_tokens += other.prompt_tokens;
        self.completion_tokens += other.completion_tokens;
        self.calls += other.calls;
    }

    pub fn total_tokens(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferenceResult {
    pub answer: String,
    pub raw_text: String,
    pub usage: Usage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub votes: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub tie: bool,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub truncated: bool,
}

/// Last non-empty line, trimmed.
pub fn extract_answer(raw: &str) -> String {
    raw.lines()
        .map(str::trim)
        .rfind(|l| !l.is_empty())
        .unwrap_or("")
        .to_string()
}

/// Most frequent vote; among equals the one seen first wins. The flag is
/// set when more than one answer reaches the top count.
pub fn majority_vote(votes: &[String]) -> (String, bool) {
    let mut counts: Vec<(&str, usize)> = Vec::new();
    for v in votes {
        match counts.iter_mut().find(|(a, _)| *a == v) {
            Some((_, c)) => *c += 1,
            None => counts.push((v, 1)),
        }
    }
    let best = counts.iter().map(|c| c.1).max().unwrap_or(0);
    let mut top = counts.iter().filter(|c| c.1 == best);
    let winner = top.next().map(|c| c.0.to_string()).unwrap_or_default();
    (winner, top.next().is_some())
}

/// One retried chat call.
pub fn chat(
    model: &dyn ChatModel,
    prompt: &PromptBundle,
    temperature: f64,
    max_tokens: u32,
    retry: &RetryPolicy,
) -> Result<ChatResponse> {
    retry.run(|| model.complete(prompt, temperature, max_tokens))
}

/// Answers a prompt; with `num_generations > 1` the answer is a majority
/// vote over independent samples.
pub fn generate(
    model: &dyn ChatModel,
    prompt: &PromptBundle,
    cfg: &GenerationConfig,
    retry: &RetryPolicy,
) -> Result<InferenceResult> {
    cfg.validate()?;
    let mut usage = Usage::default();
    let mut raws = Vec::new();
    let mut truncated = false;
    for _ in 0..cfg.num_generations {
        let r = chat(model, prompt, cfg.temperature, cfg.max_tokens, retry)?;
        usage.add(Usage::of(&r));
        truncated |= r.finish_reason.as_deref() == Some("length");
        raws.push(r.text);
    }
    if cfg.num_generations == 1 {
        let raw = raws.pop().unwrap();
        return Ok(InferenceResult {
            answer: extract_answer(&raw),
            raw_text: raw,
            usage,
            votes: None,
            tie: false,
            truncated,
        });
    }
    let votes: Vec<String> = raws.iter().map(|r| extract_answer(r)).collect();
    let (answer, tie) = majority_vote(&votes);
    let raw_text = raws[votes.iter().position(|v| *v == answer).unwrap()].clone();
    Ok(InferenceResult {
        answer,
        raw_text,
        usage,
        votes: Some(votes),
        tie,
        truncated,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenSummary {
    pub queries: usize,
    pub mean_prompt_tokens: f64,
    pub mean_completion_tokens: f64,
    pub mean_total_tokens: f64,
    pub mean_calls: f64,
}

/// Per-method mean usage per query.
pub fn account_tokens<'a>(results: impl IntoIterator<Item = (&'a str, &'a Usage)>) -> BTreeMap<String, TokenSummary> {
    let mut sums: BTreeMap<String, (usize, Usage)> = BTreeMap::new();
    for (method, u) in results {
        let e = sums.entry(method.to_string()).or_default();
        e.0 += 1;
        e.1.add(*u);
    }
    sums.into_iter()
        .map(|(m, (n, u))| {
            let d = n.max(1) as f64;
            (
                m,
                TokenSummary {
                    queries: n,
                    mean_prompt_tokens: u.prompt_tokens as f64 / d,
                    mean_completion_tokens: u.completion_tokens as f64 / d,
                    mean_total_tokens: u.total_tokens() as f64 / d,
                    mean_calls: u.calls as f64 / d,
                },
            )
        })
        .collect()
}
