use std::time::Duration;

use async_trait::async_trait;
use serde_json::{json, Value};

use super::{BackendProfile, ChatRequest, ChatResponse, ContentPart, Transport, TransportError, Usage};

/// OpenAI-style `POST {endpoint}/chat/completions` transport.
#[derive(Debug, Clone, Default)]
pub struct HttpTransport {
    client: reqwest::Client,
}

impl HttpTransport {
    pub fn new() -> Self {
        Self::default()
    }

    fn url(profile: &BackendProfile, path: &str) -> String {
        format!("{}/{path}", profile.endpoint.trim_end_matches('/'))
    }

    fn api_key(profile: &BackendProfile) -> Option<String> {
        profile.api_key_env.as_deref().and_then(|var| std::env::var(var).ok())
    }
}

/// Wire body for a chat-completions call. Text-only messages are sent as a
/// plain string; messages with images use the content-parts array form.
pub fn wire_body(profile: &BackendProfile, request: &ChatRequest) -> Value {
    let messages: Vec<Value> = request
        .messages
        .iter()
        .map(|m| {
            let text_only = m.content.iter().all(|p| matches!(p, ContentPart::Text { .. }));
            let content = if text_only {
                Value::String(
                    m.content
                        .iter()
                        .filter_map(|p| match p {
                            ContentPart::Text { text } => Some(text.as_str()),
                            ContentPart::ImageUrl { .. } => None,
                        })
                        .collect::<Vec<_>>()
                        .join("\n"),
                )
            } else {
                Value::Array(
                    m.content
                        .iter()
                        .map(|p| match p {
                            ContentPart::Text { text } => json!({"type": "text", "text": text}),
                            ContentPart::ImageUrl { url } => json!({"type": "image_url", "image_url": {"url": url}}),
                        })
                        .collect(),
                )
            };
            json!({"role": m.role, "content": content})
        })
        .collect();
    json!({
        "model": profile.model,
        "messages": messages,
        "temperature": request.temperature,
        "max_tokens": request.max_tokens,
        "seed": request.seed,
    })
}

/// Pull text, finish reason and usage out of a chat-completions response.
pub fn parse_completion(body: &Value) -> Result<ChatResponse, TransportError> {
    let choice = body
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| TransportError::Protocol("response has no choices".into()))?;
    let text = match choice.pointer("/message/content") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Null) | None => String::new(),
        Some(Value::Array(parts)) => parts
            .iter()
            .filter_map(|p| p.get("text").and_then(Value::as_str))
            .collect::<Vec<_>>()
            .join(""),
        Some(other) => return Err(TransportError::Protocol(format!("unexpected content: {other}"))),
    };
    let finish_reason = choice
        .get("finish_reason")
        .and_then(Value::as_str)
        .unwrap_or("unknown")
        .to_string();
    let usage = body
        .get("usage")
        .map(|u| Usage {
            prompt_tokens: u.get("prompt_tokens").and_then(Value::as_u64).unwrap_or(0),
            completion_tokens: u.get("completion_tokens").and_then(Value::as_u64).unwrap_or(0),
        })
        .unwrap_or_default();
    Ok(ChatResponse { text, finish_reason, usage })
}

#[async_trait]
impl Transport for HttpTransport {
    async fn send(&self, profile: &BackendProfile, request: &ChatRequest) -> Result<ChatResponse, TransportError> {
        let mut builder = self
            .client
            .post(Self::url(profile, "chat/completions"))
            .timeout(Duration::from_millis(profile.timeout_ms))
            .json(&wire_body(profile, request));
        if let Some(key) = Self::api_key(profile) {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().await.map_err(|e| {
            if e.is_timeout() {
                TransportError::Timeout
            } else {
                TransportError::Network(e.to_string())
            }
        })?;
        let status = response.status();
        if !status.is_success() {
            let retry_after = response
                .headers()
                .get(reqwest::header::RETRY_AFTER)
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.trim().parse::<u64>().ok())
                .map(Duration::from_secs);
            let body = response.text().await.unwrap_or_default();
            return Err(TransportError::Status { status: status.as_u16(), retry_after, body });
        }
        let body: Value = response
            .json()
            .await
            .map_err(|e| TransportError::Protocol(e.to_string()))?;
        parse_completion(&body)
    }

    async fn probe(&self, profile: &BackendProfile) -> bool {
        let mut builder = self.client.get(Self::url(profile, "models")).timeout(Duration::from_secs(1));
        if let Some(key) = Self::api_key(profile) {
            builder = builder.bearer_auth(key);
        }
        builder.send().await.is_ok()
    }
}
