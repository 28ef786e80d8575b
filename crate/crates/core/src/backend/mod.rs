//! Chat-completion backends.
//!
//! A [`Backend`] wraps a [`Transport`] (a provider adapter or the seeded
//! mock) with retries, an in-flight limit and an optional token-bucket rate
//! limit. The pipeline only ever talks to a `Backend`.

mod http;
pub mod mock;

use std::path::Path;
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::{AnthropicCompatible, OpenAiCompatible};
pub use mock::{MockScript, MockTransport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_k: Option<u32>,
    pub top_p: f64,
    pub max_tokens: Option<u32>,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            temperature: 0.7,
            top_k: Some(50),
            top_p: 0.9,
            max_tokens: None,
        }
    }
}

impl SamplingParams {
    pub fn validate(&self) -> Result<(), String> {
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(format!("temperature must be >= 0, got {}", self.temperature));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(format!("top_p must be in (0, 1], got {}", self.top_p));
        }
        if self.top_k == Some(0) {
            return Err("top_k must be positive".into());
        }
        if self.max_tokens == Some(0) {
            return Err("max_tokens must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub params: SamplingParams,
    /// Correlation id; the mock also mixes it into its seed.
    pub request_tag: String,
}

impl CompletionRequest {
    pub fn validate(&self) -> Result<(), BackendError> {
        if !self.messages.iter().any(|m| m.role == Role::User) {
            return Err(BackendError::InvalidRequest("no user message".into()));
        }
        if self.messages.iter().any(|m| m.content.is_empty()) {
            return Err(BackendError::InvalidRequest("empty message text".into()));
        }
        self.params.validate().map_err(BackendError::InvalidRequest)
    }

    pub fn last_user_text(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .unwrap_or("")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Complete,
    Length,
    ContentFilter,
    Other(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionResponse {
    pub text: String,
    pub finish_reason: FinishReason,
    pub usage: Option<Usage>,
    pub latency: Duration,
}

#[derive(Debug, Clone, Error, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum BackendError {
    #[error("authentication failed: {0}")]
    Authentication(String),
    #[error("rate limited: {0}")]
    RateLimited(String),
    #[error("rate limit still exceeded after {attempts} attempts")]
    RateLimitExhausted { attempts: u32 },
    #[error("malformed provider response: {0}")]
    MalformedResponse(String),
    #[error("request timed out")]
    Timeout,
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("server error {status}: {body}")]
    Server { status: u16, body: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("mock has no scripted reply for prompt hash {0}")]
    MockMiss(String),
}

impl BackendError {
    /// Transport-level failures worth retrying.
    pub fn is_transient(&self) -> bool {
        matches!(
            self,
            BackendError::RateLimited(_)
                | BackendError::Timeout
                | BackendError::Transport(_)
                | BackendError::Server { .. }
        )
    }
}

/// A provider adapter: one request in, one response out, no retries.
pub trait Transport: Send + Sync {
    fn send(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Mock,
    OpenaiCompatible,
    AnthropicCompatible,
}

fn default_in_flight() -> usize {
    4
}
fn default_retries() -> u32 {
    3
}
fn default_retry_base_ms() -> u64 {
    500
}
fn default_timeout() -> u64 {
    120
}

/// Backend configuration file contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub kind: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    pub model: String,
    /// Name of the environment variable holding the API key.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_env: Option<String>,
    #[serde(default)]
    pub params: SamplingParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mock: Option<MockScript>,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate_limit_rpm: Option<f64>,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_retry_base_ms")]
    pub retry_base_ms: u64,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

impl BackendConfig {
    pub fn mock(model: impl Into<String>, script: MockScript) -> Self {
        Self {
            kind: BackendKind::Mock,
            endpoint: None,
            model: model.into(),
            auth_env: None,
            params: SamplingParams::default(),
            mock: Some(script),
            max_in_flight: default_in_flight(),
            rate_limit_rpm: None,
            max_retries: default_retries(),
            retry_base_ms: default_retry_base_ms(),
            timeout_secs: default_timeout(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid backend config: {0}")]
    Invalid(String),
    #[error("environment variable {0} is not set")]
    MissingCredential(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl RetryPolicy {
    pub fn delay_for(&self, attempt: u32) -> Duration {
        let factor = 1u32.checked_shl(attempt).unwrap_or(u32::MAX);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: default_retries(),
            base_delay: Duration::from_millis(default_retry_base_ms()),
            max_delay: Duration::from_secs(8),
        }
    }
}

struct Gate {
    in_flight: Mutex<usize>,
    freed: Condvar,
    limit: usize,
}

struct GateGuard<'a>(&'a Gate);

impl Gate {
    fn new(limit: usize) -> Self {
        Self {
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
            limit: limit.max(1),
        }
    }

    fn enter(&self) -> GateGuard<'_> {
        let mut n = self.in_flight.lock().unwrap_or_else(|e| e.into_inner());
        while *n >= self.limit {
            n = self.freed.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n += 1;
        GateGuard(self)
    }
}

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        let mut n = self.0.in_flight.lock().unwrap_or_else(|e| e.into_inner());
        *n -= 1;
        self.0.freed.notify_one();
    }
}

struct TokenBucket {
    per_sec: f64,
    capacity: f64,
    state: Mutex<(f64, Instant)>,
}

impl TokenBucket {
    fn new(rpm: f64) -> Self {
        let capacity = (rpm / 60.0).max(1.0);
        Self {
            per_sec: rpm / 60.0,
            capacity,
            state: Mutex::new((capacity, Instant::now())),
        }
    }

    fn acquire(&self) {
        loop {
            let wait = {
                let mut s = self.state.lock().unwrap_or_else(|e| e.into_inner());
                let now = Instant::now();
                let refill = now.duration_since(s.1).as_secs_f64() * self.per_sec;
                s.0 = (s.0 + refill).min(self.capacity);
                s.1 = now;
                if s.0 >= 1.0 {
                    s.0 -= 1.0;
                    return;
                }
                (1.0 - s.0) / self.per_sec
            };
            std::thread::sleep(Duration::from_secs_f64(wait));
        }
    }
}

pub struct Backend {
    model: String,
    params: SamplingParams,
    transport: Box<dyn Transport>,
    retry: RetryPolicy,
    gate: Gate,
    bucket: Option<TokenBucket>,
}

impl std::fmt::Debug for Backend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Backend")
            .field("model", &self.model)
            .field("params", &self.params)
            .field("retry", &self.retry)
            .finish_non_exhaustive()
    }
}

impl Backend {
    pub fn new(model: impl Into<String>, transport: Box<dyn Transport>) -> Self {
        Self {
            model: model.into(),
            params: SamplingParams::default(),
            transport,
            retry: RetryPolicy::default(),
            gate: Gate::new(default_in_flight()),
            bucket: None,
        }
    }

    pub fn with_params(mut self, params: SamplingParams) -> Self {
        self.params = params;
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_max_in_flight(mut self, limit: usize) -> Self {
        self.gate = Gate::new(limit);
        self
    }

    pub fn with_rate_limit(mut self, rpm: Option<f64>) -> Self {
        self.bucket = rpm.filter(|r| *r > 0.0).map(TokenBucket::new);
        self
    }

    pub fn from_config(config: &BackendConfig) -> Result<Self, ConfigError> {
        config.params.validate().map_err(ConfigError::Invalid)?;
        if config.model.trim().is_empty() {
            return Err(ConfigError::Invalid("model must be non-empty".into()));
        }
        let timeout = Duration::from_secs(config.timeout_secs.max(1));
        let credential = || -> Result<String, ConfigError> {
            let var = config.auth_env.as_deref().ok_or_else(|| {
                ConfigError::Invalid("auth_env is required for remote backends".into())
            })?;
            std::env::var(var).map_err(|_| ConfigError::MissingCredential(var.to_string()))
        };
        let endpoint = || -> Result<String, ConfigError> {
            config
                .endpoint
                .clone()
                .ok_or_else(|| ConfigError::Invalid("endpoint is required for remote backends".into()))
        };
        let transport: Box<dyn Transport> = match config.kind {
            BackendKind::Mock => Box::new(MockTransport::new(config.mock.clone().unwrap_or_default())),
            BackendKind::OpenaiCompatible => {
                Box::new(OpenAiCompatible::new(endpoint()?, credential()?, timeout).map_err(ConfigError::Invalid)?)
            }
            BackendKind::AnthropicCompatible => Box::new(
                AnthropicCompatible::new(endpoint()?, credential()?, timeout).map_err(ConfigError::Invalid)?,
            ),
        };
        Ok(Backend::new(config.model.clone(), transport)
            .with_params(config.params.clone())
            .with_retry(RetryPolicy {
                max_retries: config.max_retries,
                base_delay: Duration::from_millis(config.retry_base_ms),
                max_delay: Duration::from_secs(8),
            })
            .with_max_in_flight(config.max_in_flight)
            .with_rate_limit(config.rate_limit_rpm))
    }

    pub fn model(&self) -> &str {
        &self.model
    }

    pub fn params(&self) -> &SamplingParams {
        &self.params
    }

    /// Builds a request with this backend's model and default parameters.
    pub fn request(&self, messages: Vec<ChatMessage>, tag: impl Into<String>) -> CompletionRequest {
        CompletionRequest {
            model: self.model.clone(),
            messages,
            params: self.params.clone(),
            request_tag: tag.into(),
        }
    }

    /// Sends a request, retrying transient failures with exponential backoff.
    pub fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        request.validate()?;
        let mut attempt = 0u32;
        loop {
            if let Some(bucket) = &self.bucket {
                bucket.acquire();
            }
            let result = {
                let _slot = self.gate.enter();
                self.transport.send(request)
            };
            match result {
                Ok(resp) => return Ok(resp),
                Err(e) if e.is_transient() && attempt < self.retry.max_retries => {
                    log::warn!(
                        "request {} failed ({e}); retry {} of {}",
                        request.request_tag,
                        attempt + 1,
                        self.retry.max_retries
                    );
                    std::thread::sleep(self.retry.delay_for(attempt));
                    attempt += 1;
                }
                Err(BackendError::RateLimited(_)) => {
                    return Err(BackendError::RateLimitExhausted {
                        attempts: attempt + 1,
                    })
                }
                Err(e) => return Err(e),
            }
        }
    }
}

/// Reads a backend configuration file.
pub fn load_backend_config(path: &Path) -> Result<BackendConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| ConfigError::Invalid(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU32, AtomicUsize, Ordering};
    use std::sync::Arc;

    struct Flaky {
        calls: Arc<AtomicU32>,
        fail_times: u32,
        error: BackendError,
    }

    impl Transport for Flaky {
        fn send(&self, _r: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.fail_times {
                return Err(self.error.clone());
            }
            Ok(CompletionResponse {
                text: "ok".into(),
                finish_reason: FinishReason::Complete,
                usage: None,
                latency: Duration::ZERO,
            })
        }
    }

    fn fast_retry(max: u32) -> RetryPolicy {
        RetryPolicy {
            max_retries: max,
            base_delay: Duration::from_millis(1),
            max_delay: Duration::from_millis(2),
        }
    }

    fn backend(fail_times: u32, error: BackendError, max: u32) -> (Backend, Arc<AtomicU32>) {
        let calls = Arc::new(AtomicU32::new(0));
        let b = Backend::new(
            "m",
            Box::new(Flaky {
                calls: calls.clone(),
                fail_times,
                error,
            }),
        )
        .with_retry(fast_retry(max));
        (b, calls)
    }

    #[test]
    fn transient_errors_are_retried() {
        let (b, calls) = backend(2, BackendError::Timeout, 3);
        let req = b.request(vec![ChatMessage::user("hi")], "t");
        assert_eq!(b.complete(&req).unwrap().text, "ok");
        assert_eq!(calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn rate_limit_exhaustion() {
        let (b, calls) = backend(10, BackendError::RateLimited("429".into()), 2);
        let req = b.request(vec![ChatMessage::user("hi")], "t");
        assert_eq!(
            b.complete(&req),
            Err(BackendError::RateLimitExhausted { attempts: 3 })
        );
        assert_eq!(calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn auth_and_validation_errors_are_not_retried() {
        let (b, calls) = backend(10, BackendError::Authentication("bad key".into()), 5);
        let req = b.request(vec![ChatMessage::user("hi")], "t");
        assert!(matches!(b.complete(&req), Err(BackendError::Authentication(_))));
        assert_eq!(calls.load(Ordering::SeqCst), 1);

        let req = b.request(vec![ChatMessage::assistant("no user turn")], "t");
        assert!(matches!(b.complete(&req), Err(BackendError::InvalidRequest(_))));
        let req = b.request(vec![ChatMessage::user("")], "t");
        assert!(matches!(b.complete(&req), Err(BackendError::InvalidRequest(_))));
        assert_eq!(calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn backoff_grows_and_caps() {
        let p = RetryPolicy {
            max_retries: 5,
            base_delay: Duration::from_millis(100),
            max_delay: Duration::from_millis(350),
        };
        assert_eq!(p.delay_for(0), Duration::from_millis(100));
        assert_eq!(p.delay_for(1), Duration::from_millis(200));
        assert_eq!(p.delay_for(2), Duration::from_millis(350));
        assert_eq!(p.delay_for(40), Duration::from_millis(350));
    }

    struct Slow {
        current: Arc<AtomicUsize>,
        peak: Arc<AtomicUsize>,
    }

    impl Transport for Slow {
        fn send(&self, _r: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
            let now = self.current.fetch_add(1, Ordering::SeqCst) + 1;
            self.peak.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(Duration::from_millis(15));
            self.current.fetch_sub(1, Ordering::SeqCst);
            Ok(CompletionResponse {
                text: "ok".into(),
                finish_reason: FinishReason::Complete,
                usage: None,
                latency: Duration::ZERO,
            })
        }
    }

    #[test]
    fn in_flight_limit_is_enforced() {
        let peak = Arc::new(AtomicUsize::new(0));
        let b = Arc::new(
            Backend::new(
                "m",
                Box::new(Slow {
                    current: Arc::new(AtomicUsize::new(0)),
                    peak: peak.clone(),
                }),
            )
            .with_max_in_flight(2),
        );
        let handles: Vec<_> = (0..8)
            .map(|i| {
                let b = b.clone();
                std::thread::spawn(move || {
                    let req = b.request(vec![ChatMessage::user("x")], format!("{i}"));
                    b.complete(&req).unwrap();
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }

    #[test]
    fn config_parsing_and_credentials() {
        let cfg: BackendConfig = serde_json::from_str(
            r#"{"kind":"openai_compatible","endpoint":"http://127.0.0.1:1/v1/chat/completions",
                "model":"gpt","auth_env":"BAME_TEST_SURELY_UNSET_VAR"}"#,
        )
        .unwrap();
        assert_eq!(cfg.params, SamplingParams::default());
        assert_eq!(cfg.max_in_flight, 4);
        assert!(matches!(
            Backend::from_config(&cfg),
            Err(ConfigError::MissingCredential(_))
        ));
        let bad: Result<BackendConfig, _> = serde_json::from_str(r#"{"kind":"carrier_pigeon","model":"x"}"#);
        assert!(bad.is_err());
        let mut mock = BackendConfig::mock("m", MockScript::default());
        mock.params.top_p = 0.0;
        assert!(matches!(Backend::from_config(&mock), Err(ConfigError::Invalid(_))));
    }
}
