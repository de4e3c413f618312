//! Deterministic test doubles.
//!
//! * [`KeywordAnswerer`] reads a rendered caption-answer prompt and replies
//!   `Answer: <L>` where `L` is the only option whose normalized text occurs
//!   in the caption section. With zero or several matches it falls back to
//!   `Answer: A` (or, with `fallback=abstain`, an unparseable reply).
//! * [`ScriptedTransport`] answers from a first-match rule table; an
//!   unmatched request is a permanent scripted-miss error.
//! * [`Instrumented`] and [`Flaky`] wrap any transport to observe concurrency
//!   and requests, or to inject failures.

use std::path::Path;
use std::sync::atomic::{AtomicU32, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use super::{BackendProfile, ChatRequest, ChatResponse, Transport, TransportError, Usage};
use crate::mcq::normalize;
use crate::template::PromptTemplate;

fn reply(request: &ChatRequest, text: String) -> ChatResponse {
    ChatResponse {
        usage: Usage {
            prompt_tokens: request.text().split_whitespace().count() as u64,
            completion_tokens: text.split_whitespace().count() as u64,
        },
        text,
        finish_reason: "stop".into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    /// Reply with the first label.
    #[default]
    FirstLabel,
    /// Reply with text that parses as no answer.
    Abstain,
}

pub const ABSTAIN_REPLY: &str = "unknown";

#[derive(Debug, Clone)]
pub struct KeywordAnswerer {
    template: PromptTemplate,
    fallback: Fallback,
}

impl Default for KeywordAnswerer {
    fn default() -> Self {
        Self::new(PromptTemplate::default_answer(), Fallback::FirstLabel)
    }
}

impl KeywordAnswerer {
    pub fn new(template: PromptTemplate, fallback: Fallback) -> Self {
        KeywordAnswerer { template, fallback }
    }

    /// The reply text for one rendered prompt.
    pub fn answer(&self, prompt: &str) -> String {
        let fallback = || match self.fallback {
            Fallback::FirstLabel => "Answer: A".to_string(),
            Fallback::Abstain => ABSTAIN_REPLY.to_string(),
        };
        let Some(parsed) = self.template.extract(prompt) else {
            return fallback();
        };
        let caption = normalize(&parsed.caption);
        let mut hits = parsed.options.iter().filter(|o| {
            let needle = normalize(&o.text);
            !needle.is_empty() && caption.contains(&needle)
        });
        match (hits.next(), hits.next()) {
            (Some(only), None) => format!("Answer: {}", only.label),
            _ => fallback(),
        }
    }
}

#[async_trait]
impl Transport for KeywordAnswerer {
    async fn send(&self, _profile: &BackendProfile, request: &ChatRequest) -> Result<ChatResponse, TransportError> {
        Ok(reply(request, self.answer(&request.text())))
    }
}

/// One scripted rule. Every present condition must hold for a match.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptRule {
    /// Substring of the request's joined text.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contains: Option<String>,
    /// Whether an image must (true) or must not (false) be attached.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    /// Reply with this HTTP status instead of a completion.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<u16>,
}

impl ScriptRule {
    pub fn matches(&self, request: &ChatRequest) -> bool {
        self.contains.as_ref().is_none_or(|c| request.text().contains(c.as_str()))
            && self.image.is_none_or(|want| request.has_image() == want)
            && self
                .image_url
                .as_ref()
                .is_none_or(|u| request.image_urls().any(|x| x == u))
            && self.seed.is_none_or(|s| request.seed == s)
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Script {
    pub rules: Vec<ScriptRule>,
}

#[derive(Debug, Clone, Default)]
pub struct ScriptedTransport {
    rules: Vec<ScriptRule>,
}

impl ScriptedTransport {
    pub fn new(rules: Vec<ScriptRule>) -> Self {
        ScriptedTransport { rules }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, String> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let script: Script = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        Ok(Self::new(script.rules))
    }
}

#[async_trait]
impl Transport for ScriptedTransport {
    async fn send(&self, _profile: &BackendProfile, request: &ChatRequest) -> Result<ChatResponse, TransportError> {
        let rule = self.rules.iter().find(|r| r.matches(request)).ok_or_else(|| {
            let text = request.text();
            let head: String = text.chars().take(80).collect();
            TransportError::ScriptedMiss(head)
        })?;
        if let Some(status) = rule.status {
            return Err(TransportError::Status { status, retry_after: None, body: "scripted failure".into() });
        }
        Ok(reply(request, rule.response.clone().unwrap_or_default()))
    }
}

/// Build a mock transport from the part of an endpoint after `mock:`.
pub fn from_spec(spec: &str) -> Result<Arc<dyn Transport>, String> {
    if let Some(path) = spec.strip_prefix("scripted:") {
        return Ok(Arc::new(ScriptedTransport::load(path)?));
    }
    let (kind, query) = spec.split_once('?').unwrap_or((spec, ""));
    match kind {
        "keyword" => {
            let mut fallback = Fallback::FirstLabel;
            let mut delay = Duration::ZERO;
            for pair in query.split('&').filter(|p| !p.is_empty()) {
                match pair {
                    "fallback=first_label" => fallback = Fallback::FirstLabel,
                    "fallback=abstain" => fallback = Fallback::Abstain,
                    other => match other.strip_prefix("delay_ms=").map(str::parse::<u64>) {
                        Some(Ok(ms)) => delay = Duration::from_millis(ms),
                        _ => return Err(format!("unknown keyword mock option `{other}`")),
                    },
                }
            }
            let answerer = KeywordAnswerer::new(PromptTemplate::default_answer(), fallback);
            if delay.is_zero() {
                Ok(Arc::new(answerer))
            } else {
                Ok(Arc::new(Instrumented::with_delay(answerer, delay)))
            }
        }
        other => Err(format!("unknown mock kind `{other}`")),
    }
}

/// Wraps a transport, recording requests and peak concurrency.
pub struct Instrumented<T> {
    inner: T,
    delay: Duration,
    calls: AtomicUsize,
    in_flight: AtomicUsize,
    peak: AtomicUsize,
    requests: Mutex<Vec<ChatRequest>>,
}

impl<T: Transport> Instrumented<T> {
    pub fn new(inner: T) -> Self {
        Self::with_delay(inner, Duration::ZERO)
    }

    /// Hold each call open for `delay` so overlapping calls are observable.
    pub fn with_delay(inner: T, delay: Duration) -> Self {
        Instrumented {
            inner,
            delay,
            calls: AtomicUsize::new(0),
            in_flight: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
            requests: Mutex::new(Vec::new()),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn peak_in_flight(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.requests.lock().expect("lock").clone()
    }
}

#[async_trait]
impl<T: Transport> Transport for Instrumented<T> {
    async fn send(&self, profile: &BackendProfile, request: &ChatRequest) -> Result<ChatResponse, TransportError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.requests.lock().expect("lock").push(request.clone());
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        if !self.delay.is_zero() {
            tokio::time::sleep(self.delay).await;
        }
        let out = self.inner.send(profile, request).await;
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        out
    }
}

/// Fails the first `failures` calls with `status`, then delegates.
pub struct Flaky<T> {
    inner: T,
    status: u16,
    remaining: AtomicU32,
}

impl<T: Transport> Flaky<T> {
    pub fn new(inner: T, failures: u32, status: u16) -> Self {
        Flaky { inner, status, remaining: AtomicU32::new(failures) }
    }
}

#[async_trait]
impl<T: Transport> Transport for Flaky<T> {
    async fn send(&self, profile: &BackendProfile, request: &ChatRequest) -> Result<ChatResponse, TransportError> {
        let fail = self
            .remaining
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
            .is_ok();
        if fail {
            return Err(TransportError::Status { status: self.status, retry_after: None, body: "injected".into() });
        }
        self.inner.send(profile, request).await
    }
}

#[async_trait]
impl<T: Transport + ?Sized> Transport for Arc<T> {
    async fn send(&self, profile: &BackendProfile, request: &ChatRequest) -> Result<ChatResponse, TransportError> {
        (**self).send(profile, request).await
    }

    async fn probe(&self, profile: &BackendProfile) -> bool {
        (**self).probe(profile).await
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mcq::{shuffle_mcq, Mcq};
    use crate::template::render_answer_prompt;

    fn q() -> Mcq {
        Mcq {
            id: "q".into(),
            image_id: "i".into(),
            stem: "What animal?".into(),
            options: vec!["zebra".into(), "horse".into(), "donkey".into(), "mule".into()],
            correct_index: 0,
            provenance: String::new(),
        }
    }

    #[test]
    fn keyword_answers_unique_match() {
        let mock = KeywordAnswerer::default();
        for seed in 0..20 {
            let s = shuffle_mcq(&q(), seed);
            let p = render_answer_prompt("A striped Zebra grazing.", &s, &PromptTemplate::default_answer()).unwrap();
            assert_eq!(mock.answer(&p), format!("Answer: {}", s.correct_label));
        }
    }

    #[test]
    fn keyword_falls_back_on_zero_or_many() {
        let mock = KeywordAnswerer::default();
        let abstain = KeywordAnswerer::new(PromptTemplate::default_answer(), Fallback::Abstain);
        let s = shuffle_mcq(&q(), 5);
        let t = PromptTemplate::default_answer();
        for caption in ["", "a field", "a horse next to a donkey"] {
            let p = render_answer_prompt(caption, &s, &t).unwrap();
            assert_eq!(mock.answer(&p), "Answer: A");
            assert_eq!(abstain.answer(&p), ABSTAIN_REPLY);
        }
    }

    #[tokio::test]
    async fn scripted_rules_and_miss() {
        let t = ScriptedTransport::new(vec![
            ScriptRule { contains: Some("hello".into()), image: Some(true), response: Some("img".into()), ..Default::default() },
            ScriptRule { contains: Some("hello".into()), response: Some("blind".into()), ..Default::default() },
        ]);
        let p = BackendProfile::mock_keyword("p");
        let with = ChatRequest::user("hello", 0.0, 1, 0).with_image("u");
        assert_eq!(t.send(&p, &with).await.unwrap().text, "img");
        assert_eq!(t.send(&p, &ChatRequest::user("hello", 0.0, 1, 0)).await.unwrap().text, "blind");
        let miss = t.send(&p, &ChatRequest::user("bye", 0.0, 1, 0)).await.unwrap_err();
        assert!(matches!(miss, TransportError::ScriptedMiss(_)));
    }

    #[test]
    fn spec_parsing() {
        assert!(from_spec("keyword").is_ok());
        assert!(from_spec("keyword?fallback=abstain").is_ok());
        assert!(from_spec("keyword?fallback=abstain&delay_ms=5").is_ok());
        assert!(from_spec("keyword?delay_ms=soon").is_err());
        assert!(from_spec("keyword?x=1").is_err());
        assert!(from_spec("scripted:/nonexistent/file.json").is_err());
        assert!(from_spec("oracle").is_err());
    }
}
