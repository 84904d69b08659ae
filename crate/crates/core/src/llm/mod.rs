//! Chat-completion gateway.
//!
//! Providers only see `(system, user, config)`; callers only see
//! [`PromptSpec`] and [`Completion`]. The gateway adds retries, a global
//! concurrency cap, a request-rate limiter, and record/replay transcripts.

mod providers;

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::prompting::PromptSpec;

pub use providers::{provider_from_config, AnthropicProvider, FnProvider, OpenAiProvider, ScriptedProvider};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub provider: String,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(with = "duration_ms", rename = "timeout_ms")]
    pub timeout: Duration,
    pub max_retries: u32,
    /// Overrides the provider's default endpoint.
    pub base_url: Option<String>,
    /// Environment variable holding the credential.
    pub api_key_env: Option<String>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            provider: "openai".into(),
            model: "gpt-4-turbo".into(),
            temperature: 0.0,
            max_tokens: 1024,
            timeout: Duration::from_secs(60),
            max_retries: 3,
            base_url: None,
            api_key_env: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), LlmError> {
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(LlmError::Config(format!("temperature must be >= 0, got {}", self.temperature)));
        }
        if self.model.trim().is_empty() {
            return Err(LlmError::Config("model identifier is empty".into()));
        }
        if self.max_tokens == 0 {
            return Err(LlmError::Config("max_tokens must be positive".into()));
        }
        Ok(())
    }
}

pub(crate) mod duration_ms {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub latency_ms: u64,
    pub usage: Option<Usage>,
    pub transcript_key: String,
}

/// What a provider adapter returns before the gateway wraps it.
#[derive(Debug, Clone, PartialEq)]
pub struct ProviderReply {
    pub text: String,
    pub usage: Option<Usage>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProviderError {
    #[error("request timed out")]
    Timeout,
    #[error("rate limited")]
    RateLimited,
    #[error("transient provider failure: {0}")]
    Transient(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("malformed provider response: {0}")]
    Malformed(String),
    #[error("provider rejected the request: {0}")]
    Rejected(String),
}

impl ProviderError {
    fn retryable(&self) -> bool {
        matches!(self, ProviderError::Timeout | ProviderError::RateLimited | ProviderError::Transient(_))
    }
}

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("provider timed out after {attempts} attempts")]
    Timeout { attempts: u32 },
    #[error("rate limit not cleared after {attempts} attempts")]
    RateLimitExhausted { attempts: u32 },
    #[error("transient provider failures after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("malformed provider response: {0}")]
    Malformed(String),
    #[error("provider rejected the request: {0}")]
    Rejected(String),
    #[error("no recorded transcript for key {key}")]
    CacheMiss { key: String },
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("transcript store {path}: {message}")]
    Store { path: String, message: String },
}

pub trait ChatProvider: Send + Sync {
    fn name(&self) -> &str;
    fn chat(&self, system: &str, user: &str, config: &ModelConfig) -> Result<ProviderReply, ProviderError>;
}

/// Key under which a prompt's completion is recorded.
pub fn transcript_key(prompt: &PromptSpec, model: &str) -> String {
    let mut h = Sha256::new();
    h.update(prompt.render().as_bytes());
    h.update([0u8]);
    h.update(model.as_bytes());
    hex::encode(h.finalize())
}

/// One recorded exchange, stored as `<key>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub key: String,
    pub model: String,
    pub prompt: String,
    pub text: String,
    pub usage: Option<Usage>,
}

impl Transcript {
    pub fn path_in(dir: &Path, key: &str) -> PathBuf {
        dir.join(format!("{key}.json"))
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf, LlmError> {
        let store_err = |e: &dyn std::fmt::Display| LlmError::Store {
            path: dir.display().to_string(),
            message: e.to_string(),
        };
        std::fs::create_dir_all(dir).map_err(|e| store_err(&e))?;
        let path = Self::path_in(dir, &self.key);
        let body = serde_json::to_string_pretty(self).map_err(|e| store_err(&e))?;
        // Write-then-rename so a concurrent reader never sees half a file.
        let tmp = path.with_extension(format!("json.{}.tmp", uuid::Uuid::new_v4().simple()));
        std::fs::write(&tmp, body).map_err(|e| store_err(&e))?;
        std::fs::rename(&tmp, &path).map_err(|e| store_err(&e))?;
        Ok(path)
    }

    pub fn read(dir: &Path, key: &str) -> Result<Option<Transcript>, LlmError> {
        let path = Self::path_in(dir, key);
        match std::fs::read_to_string(&path) {
            Ok(s) => serde_json::from_str(&s).map(Some).map_err(|e| LlmError::Store {
                path: path.display().to_string(),
                message: e.to_string(),
            }),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(LlmError::Store {
                path: path.display().to_string(),
                message: e.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "dir", rename_all = "lowercase")]
pub enum GatewayMode {
    Live,
    Record(PathBuf),
    Replay(PathBuf),
}

struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut p = self.permits.lock();
        while *p == 0 {
            self.cv.wait(&mut p);
        }
        *p -= 1;
        SemaphoreGuard(self)
    }
}

struct SemaphoreGuard<'a>(&'a Semaphore);

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock() += 1;
        self.0.cv.notify_one();
    }
}

pub struct LlmGateway {
    provider: Option<Arc<dyn ChatProvider>>,
    mode: GatewayMode,
    slots: Semaphore,
    min_interval: Duration,
    next_start: Mutex<Instant>,
    backoff_base: Duration,
}

impl LlmGateway {
    pub const DEFAULT_CONCURRENCY: usize = 4;

    pub fn new(provider: Arc<dyn ChatProvider>, mode: GatewayMode) -> Self {
        Self {
            provider: Some(provider),
            mode,
            slots: Semaphore {
                permits: Mutex::new(Self::DEFAULT_CONCURRENCY),
                cv: Condvar::new(),
            },
            min_interval: Duration::ZERO,
            next_start: Mutex::new(Instant::now()),
            backoff_base: Duration::from_millis(500),
        }
    }

    /// Gateway that answers only from recorded transcripts.
    pub fn replay(dir: impl Into<PathBuf>) -> Self {
        let mut g = Self::new(Arc::new(ScriptedProvider::new(Vec::<String>::new())), GatewayMode::Replay(dir.into()));
        g.provider = None;
        g
    }

    pub fn with_concurrency(mut self, n: usize) -> Self {
        self.slots.permits = Mutex::new(n.max(1));
        self
    }

    /// Minimum spacing between request starts.
    pub fn with_rate_limit(mut self, requests_per_second: f64) -> Self {
        self.min_interval = if requests_per_second > 0.0 {
            Duration::from_secs_f64(1.0 / requests_per_second)
        } else {
            Duration::ZERO
        };
        self
    }

    pub fn with_backoff(mut self, base: Duration) -> Self {
        self.backoff_base = base;
        self
    }

    pub fn mode(&self) -> &GatewayMode {
        &self.mode
    }

    pub fn complete(&self, prompt: &PromptSpec, config: &ModelConfig) -> Result<Completion, LlmError> {
        config.validate()?;
        let key = transcript_key(prompt, &config.model);
        if let GatewayMode::Replay(dir) = &self.mode {
            return match Transcript::read(dir, &key)? {
                Some(t) => Ok(Completion {
                    text: t.text,
                    latency_ms: 0,
                    usage: t.usage,
                    transcript_key: key,
                }),
                None => Err(LlmError::CacheMiss { key }),
            };
        }
        let provider = self
            .provider
            .as_ref()
            .ok_or_else(|| LlmError::Config("gateway has no provider".into()))?;
        let start = Instant::now();
        let reply = self.call_with_retries(provider.as_ref(), prompt, config)?;
        let latency_ms = start.elapsed().as_millis() as u64;
        if let GatewayMode::Record(dir) = &self.mode {
            Transcript {
                key: key.clone(),
                model: config.model.clone(),
                prompt: prompt.render(),
                text: reply.text.clone(),
                usage: reply.usage,
            }
            .write(dir)?;
        }
        Ok(Completion {
            text: reply.text,
            latency_ms,
            usage: reply.usage,
            transcript_key: key,
        })
    }

    fn wait_for_rate_slot(&self) {
        if self.min_interval.is_zero() {
            return;
        }
        let wait = {
            let mut next = self.next_start.lock();
            let now = Instant::now();
            let start = (*next).max(now);
            *next = start + self.min_interval;
            start - now
        };
        if !wait.is_zero() {
            std::thread::sleep(wait);
        }
    }

    fn call_with_retries(
        &self,
        provider: &dyn ChatProvider,
        prompt: &PromptSpec,
        config: &ModelConfig,
    ) -> Result<ProviderReply, LlmError> {
        let total = config.max_retries + 1;
        let mut attempt = 0;
        loop {
            attempt += 1;
            let result = {
                let _slot = self.slots.acquire();
                self.wait_for_rate_slot();
                provider.chat(&prompt.system, &prompt.user, config)
            };
            match result {
                Ok(reply) => return Ok(reply),
                Err(e) if e.retryable() && attempt < total => {
                    tracing::warn!(provider = provider.name(), attempt, error = %e, "retrying");
                    let factor = 1u32 << (attempt - 1).min(16);
                    std::thread::sleep(self.backoff_base * factor);
                }
                Err(e) => {
                    return Err(match e {
                        ProviderError::Timeout => LlmError::Timeout { attempts: attempt },
                        ProviderError::RateLimited => LlmError::RateLimitExhausted { attempts: attempt },
                        ProviderError::Transient(m) => LlmError::RetriesExhausted { attempts: attempt, last: m },
                        ProviderError::Auth(m) => LlmError::Auth(m),
                        ProviderError::Malformed(m) => LlmError::Malformed(m),
                        ProviderError::Rejected(m) => LlmError::Rejected(m),
                    })
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SqlExtraction {
    FencedBlock,
    SelectHeuristic,
    Verbatim,
}

/// Pulls SQL out of a completion: the first fenced block if any, otherwise
/// everything from the first `SELECT` or `WITH` keyword onwards.
pub fn extract_sql(text: &str) -> (String, SqlExtraction) {
    if let Some(open) = text.find("```") {
        let after = &text[open + 3..];
        let body_start = after.find('\n').map(|i| i + 1).unwrap_or(after.len());
        let lang = after[..body_start].trim();
        if lang.is_empty() || lang.chars().all(|c| c.is_ascii_alphanumeric()) {
            let body = &after[body_start..];
            let end = body.find("```").unwrap_or(body.len());
            return (clean(&body[..end]), SqlExtraction::FencedBlock);
        }
    }
    let upper = text.to_ascii_uppercase();
    let starts = ["SELECT", "WITH"].iter().filter_map(|kw| {
        upper.match_indices(kw).find_map(|(i, _)| {
            let before_ok = i == 0 || !upper.as_bytes()[i - 1].is_ascii_alphanumeric();
            let after = upper.as_bytes().get(i + kw.len());
            let after_ok = after.is_none_or(|b| !b.is_ascii_alphanumeric() && *b != b'_');
            (before_ok && after_ok).then_some(i)
        })
    });
    match starts.min() {
        Some(i) => (clean(&text[i..]), SqlExtraction::SelectHeuristic),
        None => (clean(text), SqlExtraction::Verbatim),
    }
}

fn clean(sql: &str) -> String {
    sql.trim().trim_end_matches(';').trim_end().to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompting::build_extraction_prompt;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn cfg(retries: u32) -> ModelConfig {
        ModelConfig {
            provider: "scripted".into(),
            model: "m".into(),
            max_retries: retries,
            ..Default::default()
        }
    }

    struct Flaky {
        fail: ProviderError,
        failures: usize,
        calls: AtomicUsize,
    }

    impl ChatProvider for Flaky {
        fn name(&self) -> &str {
            "flaky"
        }
        fn chat(&self, _: &str, _: &str, _: &ModelConfig) -> Result<ProviderReply, ProviderError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.failures {
                Err(self.fail.clone())
            } else {
                Ok(ProviderReply {
                    text: "SELECT 1".into(),
                    usage: None,
                })
            }
        }
    }

    fn flaky(fail: ProviderError, failures: usize) -> Arc<Flaky> {
        Arc::new(Flaky {
            fail,
            failures,
            calls: AtomicUsize::new(0),
        })
    }

    #[test]
    fn retries_transient_failures() {
        let p = flaky(ProviderError::RateLimited, 2);
        let g = LlmGateway::new(p.clone(), GatewayMode::Live).with_backoff(Duration::ZERO);
        let c = g.complete(&build_extraction_prompt("q"), &cfg(3)).unwrap();
        assert_eq!(c.text, "SELECT 1");
        assert_eq!(p.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn exhausted_retries_report_attempts() {
        let g = LlmGateway::new(flaky(ProviderError::RateLimited, 10), GatewayMode::Live).with_backoff(Duration::ZERO);
        let err = g.complete(&build_extraction_prompt("q"), &cfg(3)).unwrap_err();
        assert!(matches!(err, LlmError::RateLimitExhausted { attempts: 4 }), "{err:?}");
        let g = LlmGateway::new(flaky(ProviderError::Timeout, 10), GatewayMode::Live).with_backoff(Duration::ZERO);
        assert!(matches!(
            g.complete(&build_extraction_prompt("q"), &cfg(0)),
            Err(LlmError::Timeout { attempts: 1 })
        ));
    }

    #[test]
    fn auth_errors_are_not_retried() {
        let p = flaky(ProviderError::Auth("bad key".into()), 10);
        let g = LlmGateway::new(p.clone(), GatewayMode::Live).with_backoff(Duration::ZERO);
        assert!(matches!(g.complete(&build_extraction_prompt("q"), &cfg(3)), Err(LlmError::Auth(_))));
        assert_eq!(p.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn record_then_replay() {
        let dir = tempfile::tempdir().unwrap();
        let prompt = build_extraction_prompt("How many patients have asthma?");
        let rec = LlmGateway::new(
            Arc::new(ScriptedProvider::new(["[{\"mention\":\"asthma\"}]"])),
            GatewayMode::Record(dir.path().into()),
        );
        let a = rec.complete(&prompt, &cfg(0)).unwrap();
        let rep = LlmGateway::replay(dir.path());
        let b = rep.complete(&prompt, &cfg(0)).unwrap();
        assert_eq!(a.text, b.text);
        assert_eq!(a.transcript_key, b.transcript_key);

        let edited = build_extraction_prompt("How many patients have asthma ?");
        assert!(matches!(rep.complete(&edited, &cfg(0)), Err(LlmError::CacheMiss { .. })));
        let mut other_model = cfg(0);
        other_model.model = "m2".into();
        assert!(matches!(rep.complete(&prompt, &other_model), Err(LlmError::CacheMiss { .. })));
    }

    #[test]
    fn transcript_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t = Transcript {
            key: "abc".into(),
            model: "m".into(),
            prompt: "[system]\n{x}\n".into(),
            text: "SELECT \"a\"".into(),
            usage: Some(Usage {
                prompt_tokens: 3,
                completion_tokens: 4,
            }),
        };
        let path = t.write(dir.path()).unwrap();
        let first = std::fs::read(&path).unwrap();
        let back = Transcript::read(dir.path(), "abc").unwrap().unwrap();
        assert_eq!(back, t);
        back.write(dir.path()).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
    }

    #[test]
    fn concurrent_writes_of_one_key() {
        let dir = tempfile::tempdir().unwrap();
        let t = Transcript {
            key: "same".into(),
            model: "m".into(),
            prompt: "p".into(),
            text: "t".into(),
            usage: None,
        };
        std::thread::scope(|s| {
            for _ in 0..16 {
                s.spawn(|| {
                    for _ in 0..20 {
                        t.write(dir.path()).unwrap();
                    }
                });
            }
        });
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
        assert_eq!(Transcript::read(dir.path(), "same").unwrap().unwrap(), t);
    }

    #[test]
    fn recorded_prompt_matches_rendering() {
        let dir = tempfile::tempdir().unwrap();
        let prompt = build_extraction_prompt("q {{x}}");
        let g = LlmGateway::new(Arc::new(ScriptedProvider::new(["[]"])), GatewayMode::Record(dir.path().into()));
        let c = g.complete(&prompt, &cfg(0)).unwrap();
        let t = Transcript::read(dir.path(), &c.transcript_key).unwrap().unwrap();
        assert_eq!(t.prompt, prompt.render());
    }

    #[test]
    fn config_validation() {
        let mut c = cfg(0);
        c.temperature = -0.1;
        assert!(matches!(c.validate(), Err(LlmError::Config(_))));
        c.temperature = f64::NAN;
        assert!(c.validate().is_err());
        let back: ModelConfig = serde_json::from_str(&serde_json::to_string(&cfg(2)).unwrap()).unwrap();
        assert_eq!(back, cfg(2));
    }

    #[test]
    fn concurrency_cap_holds() {
        struct Counting {
            live: AtomicUsize,
            peak: AtomicUsize,
        }
        impl ChatProvider for Counting {
            fn name(&self) -> &str {
                "counting"
            }
            fn chat(&self, _: &str, _: &str, _: &ModelConfig) -> Result<ProviderReply, ProviderError> {
                let now = self.live.fetch_add(1, Ordering::SeqCst) + 1;
                self.peak.fetch_max(now, Ordering::SeqCst);
                std::thread::sleep(Duration::from_millis(5));
                self.live.fetch_sub(1, Ordering::SeqCst);
                Ok(ProviderReply {
                    text: String::new(),
                    usage: None,
                })
            }
        }
        let p = Arc::new(Counting {
            live: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        });
        let g = LlmGateway::new(p.clone(), GatewayMode::Live).with_concurrency(2);
        std::thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| g.complete(&build_extraction_prompt("q"), &cfg(0)).unwrap());
            }
        });
        assert!(p.peak.load(Ordering::SeqCst) <= 2);
    }

    #[test]
    fn sql_extraction() {
        assert_eq!(
            extract_sql("Here:\n```sql\nSELECT 1;\n```\nDone"),
            ("SELECT 1".into(), SqlExtraction::FencedBlock)
        );
        assert_eq!(extract_sql("```\nSELECT 2\n```"), ("SELECT 2".into(), SqlExtraction::FencedBlock));
        assert_eq!(
            extract_sql("The query is select count(*) from person;"),
            ("select count(*) from person".into(), SqlExtraction::SelectHeuristic)
        );
        assert_eq!(
            extract_sql("Sure. WITH a AS (SELECT 1) SELECT * FROM a"),
            ("WITH a AS (SELECT 1) SELECT * FROM a".into(), SqlExtraction::SelectHeuristic)
        );
        assert_eq!(extract_sql("no sql here"), ("no sql here".into(), SqlExtraction::Verbatim));
        assert_eq!(extract_sql("selected WITHOUT"), ("selected WITHOUT".into(), SqlExtraction::Verbatim));
    }
}
