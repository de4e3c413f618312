//! Chat-completion access to model endpoints.
//!
//! A [`BackendClient`] binds a [`BackendProfile`] to a [`Transport`] and a
//! [`ResponseCache`]. Every call consults the cache, then goes through an
//! admission semaphore sized by the profile's in-flight limit, then retries
//! transient failures with exponential backoff.

mod cache;
mod http;
pub mod mock;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;
use tokio::sync::Semaphore;

use crate::seed::SplitMix64;

pub use cache::{CacheError, DirCache, MemoryCache, ResponseCache};
pub use http::HttpTransport;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_backoff_ms: u64,
    pub multiplier: f64,
    /// Symmetric jitter bound added to each backoff sleep.
    #[serde(default)]
    pub jitter_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_attempts: 3, base_backoff_ms: 250, multiplier: 2.0, jitter_ms: 0 }
    }
}

impl RetryPolicy {
    /// Sleep before the `retry`-th retry (1-based): `base * multiplier^(retry-1)`,
    /// shifted by a jitter in `[-jitter_ms, +jitter_ms]` derived from
    /// `jitter_seed` and floored at zero.
    pub fn backoff(&self, retry: u32, jitter_seed: u64) -> Duration {
        let exp = retry.saturating_sub(1) as i32;
        let nominal = self.base_backoff_ms as f64 * self.multiplier.powi(exp);
        let jitter = if self.jitter_ms == 0 {
            0.0
        } else {
            let mut rng = SplitMix64::new(jitter_seed ^ u64::from(retry));
            let span = 2 * self.jitter_ms + 1;
            rng.below(span) as f64 - self.jitter_ms as f64
        };
        Duration::from_secs_f64(((nominal + jitter).max(0.0)) / 1000.0)
    }
}

/// A named model endpoint plus the sampling and reliability knobs used with it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendProfile {
    pub name: String,
    /// `http(s)://…` for a chat-completions server, or `mock:keyword`,
    /// `mock:keyword?fallback=abstain&delay_ms=N`, `mock:scripted:<path>`.
    pub endpoint: String,
    pub model: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_in_flight")]
    pub in_flight_limit: usize,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default)]
    pub vision_capable: bool,
    /// Name of the environment variable holding the API key, if any.
    #[serde(default)]
    pub api_key_env: Option<String>,
}

fn default_max_tokens() -> u32 {
    512
}
fn default_in_flight() -> usize {
    8
}
fn default_timeout_ms() -> u64 {
    60_000
}

impl BackendProfile {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.name.is_empty() {
            return Err(BackendError::Validation("backend name is empty".into()));
        }
        if self.in_flight_limit == 0 {
            return Err(BackendError::Validation(format!("backend `{}`: in_flight_limit must be >= 1", self.name)));
        }
        if self.retry.max_attempts == 0 {
            return Err(BackendError::Validation(format!("backend `{}`: retry.max_attempts must be >= 1", self.name)));
        }
        if !(self.retry.multiplier.is_finite() && self.retry.multiplier > 0.0) {
            return Err(BackendError::Validation(format!("backend `{}`: retry.multiplier must be positive", self.name)));
        }
        Ok(())
    }

    /// Profile for the built-in keyword answerer.
    pub fn mock_keyword(name: &str) -> Self {
        BackendProfile {
            name: name.to_string(),
            endpoint: "mock:keyword".into(),
            model: "keyword-mock".into(),
            temperature: 0.0,
            max_tokens: 16,
            in_flight_limit: 32,
            timeout_ms: 5_000,
            retry: RetryPolicy { max_attempts: 1, base_backoff_ms: 0, multiplier: 1.0, jitter_ms: 0 },
            vision_capable: false,
            api_key_env: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ContentPart {
    Text { text: String },
    ImageUrl { url: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: Vec<ContentPart>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: u64,
}

impl ChatRequest {
    /// A single user turn carrying `text`.
    pub fn user(text: impl Into<String>, temperature: f64, max_tokens: u32, seed: u64) -> Self {
        ChatRequest {
            messages: vec![ChatMessage { role: Role::User, content: vec![ContentPart::Text { text: text.into() }] }],
            temperature,
            max_tokens,
            seed,
        }
    }

    /// Attach an image to the last message, ahead of its text.
    pub fn with_image(mut self, url: impl Into<String>) -> Self {
        if let Some(last) = self.messages.last_mut() {
            last.content.insert(0, ContentPart::ImageUrl { url: url.into() });
        }
        self
    }

    pub fn has_image(&self) -> bool {
        self.image_urls().next().is_some()
    }

    pub fn image_urls(&self) -> impl Iterator<Item = &str> {
        self.messages.iter().flat_map(|m| &m.content).filter_map(|p| match p {
            ContentPart::ImageUrl { url } => Some(url.as_str()),
            ContentPart::Text { .. } => None,
        })
    }

    /// Text parts of all messages joined with newlines.
    pub fn text(&self) -> String {
        self.messages
            .iter()
            .flat_map(|m| &m.content)
            .filter_map(|p| match p {
                ContentPart::Text { text } => Some(text.as_str()),
                ContentPart::ImageUrl { .. } => None,
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub finish_reason: String,
    #[serde(default)]
    pub usage: Usage,
}

/// One request/response pair as stored in the cache.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatExchange {
    pub cache_key: String,
    pub profile: String,
    pub model: String,
    pub request: ChatRequest,
    pub response: ChatResponse,
    pub attempt_count: u32,
    pub latency_ms: u64,
}

/// Serialize with object keys sorted at every level. Strings and numbers are
/// emitted exactly as serde_json prints them.
pub fn canonical_json(value: &Value) -> String {
    fn write(value: &Value, out: &mut String) {
        match value {
            Value::Object(map) => {
                let sorted: BTreeMap<&String, &Value> = map.iter().collect();
                out.push('{');
                for (i, (k, v)) in sorted.into_iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    out.push_str(&Value::String(k.clone()).to_string());
                    out.push(':');
                    write(v, out);
                }
                out.push('}');
            }
            Value::Array(items) => {
                out.push('[');
                for (i, v) in items.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    write(v, out);
                }
                out.push(']');
            }
            scalar => out.push_str(&scalar.to_string()),
        }
    }
    let mut out = String::new();
    write(value, &mut out);
    out
}

/// SHA-256 (hex) over the canonical JSON of profile name, model and request.
pub fn cache_key(profile: &BackendProfile, request: &ChatRequest) -> String {
    let value = serde_json::json!({
        "profile": profile.name,
        "model": profile.model,
        "request": request,
    });
    hex::encode(Sha256::digest(canonical_json(&value).as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    #[error("HTTP {status}: {body}")]
    Status { status: u16, retry_after: Option<Duration>, body: String },
    #[error("network error: {0}")]
    Network(String),
    #[error("request timed out")]
    Timeout,
    #[error("malformed response: {0}")]
    Protocol(String),
    #[error("no scripted response matches the request: {0}")]
    ScriptedMiss(String),
}

impl TransportError {
    pub fn is_retryable(&self) -> bool {
        match self {
            TransportError::Status { status, .. } => *status == 429 || *status >= 500,
            TransportError::Network(_) | TransportError::Timeout => true,
            TransportError::Protocol(_) | TransportError::ScriptedMiss(_) => false,
        }
    }
}

/// Moves one request to a model and back.
#[async_trait]
pub trait Transport: Send + Sync {
    async fn send(&self, profile: &BackendProfile, request: &ChatRequest) -> Result<ChatResponse, TransportError>;

    /// Cheap reachability check; must return within about a second.
    async fn probe(&self, _profile: &BackendProfile) -> bool {
        true
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttemptLog {
    pub attempt: u32,
    pub error: String,
    pub backoff_ms: u64,
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend `{profile}` unavailable after {} attempts", attempts.len())]
    Unavailable { profile: String, attempts: Vec<AttemptLog> },
    #[error("backend `{profile}` rejected the request permanently: {error}")]
    Permanent { profile: String, error: TransportError },
    #[error("invalid backend request: {0}")]
    Validation(String),
    #[error("backend `{0}` does not accept image inputs")]
    NotVisionCapable(String),
    #[error("unknown backend `{0}`")]
    UnknownBackend(String),
    #[error("unsupported endpoint `{0}`")]
    UnsupportedEndpoint(String),
    #[error(transparent)]
    Cache(#[from] CacheError),
}

/// Call counters for one client (or a set of clients sharing it).
#[derive(Debug, Default)]
pub struct BackendStats {
    calls: AtomicU64,
    retries: AtomicU64,
    cache_hits: AtomicU64,
    cache_misses: AtomicU64,
    failures: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsSnapshot {
    /// Transport invocations, retries included.
    pub calls: u64,
    pub retries: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub failures: u64,
}

impl StatsSnapshot {
    pub fn since(&self, earlier: &StatsSnapshot) -> StatsSnapshot {
        StatsSnapshot {
            calls: self.calls - earlier.calls,
            retries: self.retries - earlier.retries,
            cache_hits: self.cache_hits - earlier.cache_hits,
            cache_misses: self.cache_misses - earlier.cache_misses,
            failures: self.failures - earlier.failures,
        }
    }
}

impl std::ops::Add for StatsSnapshot {
    type Output = StatsSnapshot;
    fn add(self, o: StatsSnapshot) -> StatsSnapshot {
        StatsSnapshot {
            calls: self.calls + o.calls,
            retries: self.retries + o.retries,
            cache_hits: self.cache_hits + o.cache_hits,
            cache_misses: self.cache_misses + o.cache_misses,
            failures: self.failures + o.failures,
        }
    }
}

impl BackendStats {
    pub fn snapshot(&self) -> StatsSnapshot {
        StatsSnapshot {
            calls: self.calls.load(Ordering::Relaxed),
            retries: self.retries.load(Ordering::Relaxed),
            cache_hits: self.cache_hits.load(Ordering::Relaxed),
            cache_misses: self.cache_misses.load(Ordering::Relaxed),
            failures: self.failures.load(Ordering::Relaxed),
        }
    }
}

/// Shareable handle for one backend profile.
#[derive(Clone)]
pub struct BackendClient {
    profile: Arc<BackendProfile>,
    transport: Arc<dyn Transport>,
    cache: Arc<dyn ResponseCache>,
    limiter: Arc<Semaphore>,
    stats: Arc<BackendStats>,
}

impl std::fmt::Debug for BackendClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BackendClient").field("profile", &self.profile.name).finish()
    }
}

impl BackendClient {
    pub fn new(
        profile: BackendProfile,
        transport: Arc<dyn Transport>,
        cache: Arc<dyn ResponseCache>,
    ) -> Result<Self, BackendError> {
        profile.validate()?;
        Ok(BackendClient {
            limiter: Arc::new(Semaphore::new(profile.in_flight_limit)),
            profile: Arc::new(profile),
            transport,
            cache,
            stats: Arc::new(BackendStats::default()),
        })
    }

    /// Build a client whose transport is chosen from the profile's endpoint.
    pub fn from_profile(profile: BackendProfile, cache: Arc<dyn ResponseCache>) -> Result<Self, BackendError> {
        let transport = transport_for(&profile)?;
        Self::new(profile, transport, cache)
    }

    pub fn profile(&self) -> &BackendProfile {
        &self.profile
    }

    pub fn stats(&self) -> StatsSnapshot {
        self.stats.snapshot()
    }

    pub fn cache(&self) -> &Arc<dyn ResponseCache> {
        &self.cache
    }

    pub async fn probe(&self) -> bool {
        tokio::time::timeout(Duration::from_secs(1), self.transport.probe(&self.profile))
            .await
            .unwrap_or(false)
    }

    pub async fn complete_chat(&self, request: ChatRequest) -> Result<ChatExchange, BackendError> {
        if request.has_image() && !self.profile.vision_capable {
            return Err(BackendError::NotVisionCapable(self.profile.name.clone()));
        }
        if request.messages.is_empty() {
            return Err(BackendError::Validation("request has no messages".into()));
        }

        let key = cache_key(&self.profile, &request);
        if let Some(hit) = self.cache.get(&key)? {
            self.stats.cache_hits.fetch_add(1, Ordering::Relaxed);
            return Ok(hit);
        }
        self.stats.cache_misses.fetch_add(1, Ordering::Relaxed);

        let _permit = self.limiter.acquire().await.expect("semaphore never closed");
        let started = Instant::now();
        let policy = &self.profile.retry;
        let timeout = Duration::from_millis(self.profile.timeout_ms);
        let jitter_seed = u64::from_str_radix(&key[..16], 16).unwrap_or(0);
        let mut attempts = Vec::new();

        for attempt in 1..=policy.max_attempts {
            self.stats.calls.fetch_add(1, Ordering::Relaxed);
            if attempt > 1 {
                self.stats.retries.fetch_add(1, Ordering::Relaxed);
            }
            let outcome = match tokio::time::timeout(timeout, self.transport.send(&self.profile, &request)).await {
                Ok(result) => result,
                Err(_) => Err(TransportError::Timeout),
            };
            match outcome {
                Ok(response) => {
                    let exchange = ChatExchange {
                        cache_key: key,
                        profile: self.profile.name.clone(),
                        model: self.profile.model.clone(),
                        request,
                        response,
                        attempt_count: attempt,
                        latency_ms: started.elapsed().as_millis() as u64,
                    };
                    self.cache.put(&exchange)?;
                    return Ok(exchange);
                }
                Err(error) if !error.is_retryable() => {
                    self.stats.failures.fetch_add(1, Ordering::Relaxed);
                    return Err(BackendError::Permanent { profile: self.profile.name.clone(), error });
                }
                Err(error) => {
                    let last = attempt == policy.max_attempts;
                    let delay = match &error {
                        TransportError::Status { status: 429, retry_after: Some(after), .. } => *after,
                        _ => policy.backoff(attempt, jitter_seed),
                    };
                    tracing::debug!(profile = %self.profile.name, attempt, %error, "backend attempt failed");
                    attempts.push(AttemptLog {
                        attempt,
                        error: error.to_string(),
                        backoff_ms: if last { 0 } else { delay.as_millis() as u64 },
                    });
                    if !last {
                        tokio::time::sleep(delay).await;
                    }
                }
            }
        }
        self.stats.failures.fetch_add(1, Ordering::Relaxed);
        Err(BackendError::Unavailable { profile: self.profile.name.clone(), attempts })
    }
}

/// Pick a transport from the endpoint scheme.
pub fn transport_for(profile: &BackendProfile) -> Result<Arc<dyn Transport>, BackendError> {
    let endpoint = profile.endpoint.as_str();
    if endpoint.starts_with("http://") || endpoint.starts_with("https://") {
        return Ok(Arc::new(HttpTransport::new()));
    }
    if let Some(spec) = endpoint.strip_prefix("mock:") {
        return mock::from_spec(spec)
            .map_err(|e| BackendError::Validation(format!("backend `{}`: {e}", profile.name)));
    }
    Err(BackendError::UnsupportedEndpoint(endpoint.to_string()))
}

/// Named clients sharing one cache.
#[derive(Debug, Clone, Default)]
pub struct BackendRegistry {
    clients: BTreeMap<String, BackendClient>,
}

impl BackendRegistry {
    pub fn from_profiles(
        profiles: impl IntoIterator<Item = BackendProfile>,
        cache: Arc<dyn ResponseCache>,
    ) -> Result<Self, BackendError> {
        let mut clients = BTreeMap::new();
        for profile in profiles {
            let name = profile.name.clone();
            if clients.contains_key(&name) {
                return Err(BackendError::Validation(format!("duplicate backend name `{name}`")));
            }
            clients.insert(name, BackendClient::from_profile(profile, cache.clone())?);
        }
        Ok(BackendRegistry { clients })
    }

    pub fn insert(&mut self, client: BackendClient) {
        self.clients.insert(client.profile().name.clone(), client);
    }

    pub fn get(&self, name: &str) -> Result<&BackendClient, BackendError> {
        self.clients.get(name).ok_or_else(|| BackendError::UnknownBackend(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = &BackendClient> {
        self.clients.values()
    }

    pub fn total_stats(&self) -> StatsSnapshot {
        self.clients.values().map(BackendClient::stats).fold(StatsSnapshot::default(), |a, b| a + b)
    }
}
