//! Provider adapters. Wire formats stop here.

use std::collections::VecDeque;
use std::sync::Arc;

use parking_lot::Mutex;
use serde_json::{json, Value};

use super::{ChatProvider, LlmError, ModelConfig, ProviderError, ProviderReply, Usage};

/// Replies from a fixed script, in order. Running past the end is a
/// `Rejected` error so tests notice unexpected extra calls.
pub struct ScriptedProvider {
    script: Mutex<VecDeque<Result<String, ProviderError>>>,
    calls: Mutex<Vec<(String, String)>>,
}

impl ScriptedProvider {
    pub fn new<I, S>(replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::from_results(replies.into_iter().map(|s| Ok(s.into())))
    }

    pub fn from_results(replies: impl IntoIterator<Item = Result<String, ProviderError>>) -> Self {
        Self {
            script: Mutex::new(replies.into_iter().collect()),
            calls: Mutex::new(Vec::new()),
        }
    }

    pub fn push(&self, reply: impl Into<String>) {
        self.script.lock().push_back(Ok(reply.into()));
    }

    /// `(system, user)` pairs seen so far.
    pub fn calls(&self) -> Vec<(String, String)> {
        self.calls.lock().clone()
    }

    pub fn remaining(&self) -> usize {
        self.script.lock().len()
    }
}

impl ChatProvider for ScriptedProvider {
    fn name(&self) -> &str {
        "scripted"
    }

    fn chat(&self, system: &str, user: &str, _: &ModelConfig) -> Result<ProviderReply, ProviderError> {
        self.calls.lock().push((system.to_string(), user.to_string()));
        match self.script.lock().pop_front() {
            Some(Ok(text)) => Ok(ProviderReply { text, usage: None }),
            Some(Err(e)) => Err(e),
            None => Err(ProviderError::Rejected("script exhausted".into())),
        }
    }
}

/// Answers with a function of `(system, user)`; handy for order-independent scripts.
pub struct FnProvider<F> {
    f: F,
}

impl<F> FnProvider<F>
where
    F: Fn(&str, &str) -> Result<String, ProviderError> + Send + Sync,
{
    pub fn new(f: F) -> Self {
        Self { f }
    }
}

impl<F> ChatProvider for FnProvider<F>
where
    F: Fn(&str, &str) -> Result<String, ProviderError> + Send + Sync,
{
    fn name(&self) -> &str {
        "function"
    }

    fn chat(&self, system: &str, user: &str, _: &ModelConfig) -> Result<ProviderReply, ProviderError> {
        (self.f)(system, user).map(|text| ProviderReply { text, usage: None })
    }
}

fn client(config: &ModelConfig) -> Result<reqwest::blocking::Client, ProviderError> {
    reqwest::blocking::Client::builder()
        .timeout(config.timeout)
        .build()
        .map_err(|e| ProviderError::Rejected(e.to_string()))
}

fn send(req: reqwest::blocking::RequestBuilder) -> Result<Value, ProviderError> {
    let resp = req.send().map_err(|e| {
        if e.is_timeout() {
            ProviderError::Timeout
        } else {
            ProviderError::Transient(e.to_string())
        }
    })?;
    let status = resp.status().as_u16();
    let body = resp.text().map_err(|e| ProviderError::Transient(e.to_string()))?;
    match status {
        200..=299 => serde_json::from_str(&body).map_err(|e| ProviderError::Malformed(e.to_string())),
        401 | 403 => Err(ProviderError::Auth(body)),
        408 => Err(ProviderError::Timeout),
        429 => Err(ProviderError::RateLimited),
        500..=599 => Err(ProviderError::Transient(format!("HTTP {status}: {body}"))),
        _ => Err(ProviderError::Rejected(format!("HTTP {status}: {body}"))),
    }
}

/// OpenAI-compatible `/chat/completions`.
pub struct OpenAiProvider {
    base_url: String,
    api_key: Option<String>,
}

impl OpenAiProvider {
    pub const DEFAULT_BASE: &'static str = "https://api.openai.com/v1";

    pub fn new(base_url: impl Into<String>, api_key: Option<String>) -> Self {
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key,
        }
    }
}

impl ChatProvider for OpenAiProvider {
    fn name(&self) -> &str {
        "openai"
    }

    fn chat(&self, system: &str, user: &str, config: &ModelConfig) -> Result<ProviderReply, ProviderError> {
        let mut req = client(config)?.post(format!("{}/chat/completions", self.base_url)).json(&json!({
            "model": config.model,
            "temperature": config.temperature,
            "max_tokens": config.max_tokens,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
        }));
        if let Some(k) = &self.api_key {
            req = req.bearer_auth(k);
        }
        let v = send(req)?;
        let text = v
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| ProviderError::Malformed("missing choices[0].message.content".into()))?;
        let usage = v.get("usage").map(|u| Usage {
            prompt_tokens: u.get("prompt_tokens").and_then(Value::as_u64).unwrap_or(0),
            completion_tokens: u.get("completion_tokens").and_then(Value::as_u64).unwrap_or(0),
        });
        Ok(ProviderReply {
            text: text.to_string(),
            usage,
        })
    }
}

/// Anthropic `/v1/messages`.
pub struct AnthropicProvider {
    base_url: String,
    api_key: Option<String>,
}

impl AnthropicProvider {
    pub const DEFAULT_BASE: &'static str = "https://api.anthropic.com";

    pub fn new(base_url: impl Into<String>, api_key: Option<String>) -> Self {
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key,
        }
    }
}

impl ChatProvider for AnthropicProvider {
    fn name(&self) -> &str {
        "anthropic"
    }

    fn chat(&self, system: &str, user: &str, config: &ModelConfig) -> Result<ProviderReply, ProviderError> {
        let mut req = client(config)?
            .post(format!("{}/v1/messages", self.base_url))
            .header("anthropic-version", "2023-06-01")
            .json(&json!({
                "model": config.model,
                "temperature": config.temperature,
                "max_tokens": config.max_tokens,
                "system": system,
                "messages": [{"role": "user", "content": user}],
            }));
        if let Some(k) = &self.api_key {
            req = req.header("x-api-key", k);
        }
        let v = send(req)?;
        let blocks = v
            .get("content")
            .and_then(Value::as_array)
            .ok_or_else(|| ProviderError::Malformed("missing content".into()))?;
        let text: String = blocks
            .iter()
            .filter(|b| b.get("type").and_then(Value::as_str) == Some("text"))
            .filter_map(|b| b.get("text").and_then(Value::as_str))
            .collect();
        let usage = v.get("usage").map(|u| Usage {
            prompt_tokens: u.get("input_tokens").and_then(Value::as_u64).unwrap_or(0),
            completion_tokens: u.get("output_tokens").and_then(Value::as_u64).unwrap_or(0),
        });
        Ok(ProviderReply { text, usage })
    }
}

/// Builds the adapter named by `config.provider`, reading the key from the environment.
pub fn provider_from_config(config: &ModelConfig) -> Result<Arc<dyn ChatProvider>, LlmError> {
    let key_var = |default: &str| config.api_key_env.clone().unwrap_or_else(|| default.to_string());
    match config.provider.as_str() {
        "openai" => Ok(Arc::new(OpenAiProvider::new(
            config.base_url.clone().unwrap_or_else(|| OpenAiProvider::DEFAULT_BASE.into()),
            std::env::var(key_var("OPENAI_API_KEY")).ok(),
        ))),
        "anthropic" => Ok(Arc::new(AnthropicProvider::new(
            config.base_url.clone().unwrap_or_else(|| AnthropicProvider::DEFAULT_BASE.into()),
            std::env::var(key_var("ANTHROPIC_API_KEY")).ok(),
        ))),
        other => Err(LlmError::Config(format!("unknown provider `{other}` (openai or anthropic)"))),
    }
}
