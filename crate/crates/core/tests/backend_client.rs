mod common;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::http::{HeaderMap, StatusCode};
use axum::routing::post;
use axum::{Json, Router};
use capreward_core::backend::mock::{Flaky, Instrumented, KeywordAnswerer, ScriptRule, ScriptedTransport};
use capreward_core::backend::{
    BackendClient, BackendError, BackendProfile, ChatRequest, DirCache, HttpTransport, MemoryCache, ResponseCache,
    RetryPolicy, TransportError,
};
use common::client_with;
use serde_json::{json, Value};

fn fast_retry(profile: BackendProfile, attempts: u32) -> BackendProfile {
    BackendProfile {
        retry: RetryPolicy { max_attempts: attempts, base_backoff_ms: 1, multiplier: 2.0, jitter_ms: 0 },
        ..profile
    }
}

#[tokio::test]
async fn mock_is_deterministic_single_attempt() {
    let client = common::keyword_client(Default::default());
    let a = client.complete_chat(ChatRequest::user("anything", 0.0, 8, 1)).await.unwrap();
    assert_eq!(a.attempt_count, 1);
    assert_eq!(a.response.text, "Answer: A");
    let fresh = common::keyword_client(Default::default());
    let b = fresh.complete_chat(ChatRequest::user("anything", 0.0, 8, 1)).await.unwrap();
    assert_eq!(a.response, b.response);
    assert_eq!(a.cache_key, b.cache_key);
}

#[tokio::test]
async fn retries_through_two_503s() {
    let flaky = Flaky::new(KeywordAnswerer::default(), 2, 503);
    let client = client_with(Arc::new(flaky), fast_retry(BackendProfile::mock_keyword("p"), 3));
    let ex = client.complete_chat(ChatRequest::user("x", 0.0, 8, 1)).await.unwrap();
    assert_eq!(ex.attempt_count, 3);
    let stats = client.stats();
    assert_eq!((stats.calls, stats.retries), (3, 2));
}

#[tokio::test]
async fn exhaustion_carries_attempt_log() {
    let flaky = Flaky::new(KeywordAnswerer::default(), 10, 503);
    let client = client_with(Arc::new(flaky), fast_retry(BackendProfile::mock_keyword("p"), 3));
    match client.complete_chat(ChatRequest::user("x", 0.0, 8, 1)).await {
        Err(BackendError::Unavailable { attempts, .. }) => {
            assert_eq!(attempts.len(), 3);
            assert_eq!(attempts.iter().map(|a| a.backoff_ms).collect::<Vec<_>>(), vec![1, 2, 0]);
        }
        other => panic!("unexpected {other:?}"),
    }
    // Failures are not cached.
    assert!(client.cache().is_empty());
}

#[tokio::test]
async fn client_errors_are_permanent() {
    let flaky = Flaky::new(KeywordAnswerer::default(), 10, 400);
    let client = client_with(Arc::new(flaky), fast_retry(BackendProfile::mock_keyword("p"), 5));
    let err = client.complete_chat(ChatRequest::user("x", 0.0, 8, 1)).await.unwrap_err();
    assert!(matches!(err, BackendError::Permanent { error: TransportError::Status { status: 400, .. }, .. }));
    assert_eq!(client.stats().calls, 1);
}

#[tokio::test]
async fn second_identical_request_hits_cache() {
    let inner = Arc::new(Instrumented::new(KeywordAnswerer::default()));
    let client = client_with(inner.clone(), BackendProfile::mock_keyword("p"));
    let req = ChatRequest::user("x", 0.0, 8, 1);
    let first = client.complete_chat(req.clone()).await.unwrap();
    let second = client.complete_chat(req).await.unwrap();
    assert_eq!(first, second);
    assert_eq!(inner.calls(), 1);
    let s = client.stats();
    assert_eq!((s.cache_hits, s.cache_misses), (1, 1));
}

#[tokio::test]
async fn image_on_text_only_profile_rejected() {
    let client = common::keyword_client(Default::default());
    let err = client
        .complete_chat(ChatRequest::user("x", 0.0, 8, 1).with_image("file:///i.png"))
        .await
        .unwrap_err();
    assert!(matches!(err, BackendError::NotVisionCapable(_)));
    assert_eq!(client.stats().calls, 0);
}

#[tokio::test]
async fn in_flight_limit_is_never_exceeded() {
    for limit in [1usize, 3, 8] {
        let inner = Arc::new(Instrumented::with_delay(KeywordAnswerer::default(), Duration::from_millis(5)));
        let profile = BackendProfile { in_flight_limit: limit, ..BackendProfile::mock_keyword("p") };
        let client = client_with(inner.clone(), profile);
        let calls = (0..40u64).map(|s| {
            let c = client.clone();
            tokio::spawn(async move { c.complete_chat(ChatRequest::user("x", 0.0, 8, s)).await.unwrap() })
        })
        .collect::<Vec<_>>();
        for h in calls {
            h.await.unwrap();
        }
        assert_eq!(inner.calls(), 40);
        assert!(inner.peak_in_flight() <= limit, "peak {} > {limit}", inner.peak_in_flight());
        assert_eq!(inner.peak_in_flight(), limit, "limit not saturated");
    }
}

#[tokio::test]
async fn timeouts_are_retried_then_reported() {
    let slow = Instrumented::with_delay(KeywordAnswerer::default(), Duration::from_millis(200));
    let profile = BackendProfile { timeout_ms: 10, ..fast_retry(BackendProfile::mock_keyword("p"), 2) };
    let client = client_with(Arc::new(slow), profile);
    let err = client.complete_chat(ChatRequest::user("x", 0.0, 8, 1)).await.unwrap_err();
    match err {
        BackendError::Unavailable { attempts, .. } => assert!(attempts.iter().all(|a| a.error.contains("timed out"))),
        other => panic!("{other:?}"),
    }
}

#[tokio::test]
async fn scripted_miss_is_not_retried() {
    let t = ScriptedTransport::new(vec![ScriptRule {
        contains: Some("known".into()),
        response: Some("ok".into()),
        ..Default::default()
    }]);
    let client = client_with(Arc::new(t), fast_retry(BackendProfile::mock_keyword("p"), 4));
    assert_eq!(client.complete_chat(ChatRequest::user("known", 0.0, 8, 1)).await.unwrap().response.text, "ok");
    let err = client.complete_chat(ChatRequest::user("other", 0.0, 8, 1)).await.unwrap_err();
    assert!(matches!(err, BackendError::Permanent { error: TransportError::ScriptedMiss(_), .. }));
}

#[tokio::test]
async fn dir_cache_survives_new_client() {
    let dir = tempfile::tempdir().unwrap();
    let inner = Arc::new(Instrumented::new(KeywordAnswerer::default()));
    let req = ChatRequest::user("x", 0.0, 8, 7);
    {
        let cache = Arc::new(DirCache::open(dir.path()).unwrap());
        let c = BackendClient::new(BackendProfile::mock_keyword("p"), inner.clone(), cache).unwrap();
        c.complete_chat(req.clone()).await.unwrap();
    }
    let cache = Arc::new(DirCache::open(dir.path()).unwrap());
    let c = BackendClient::new(BackendProfile::mock_keyword("p"), inner.clone(), cache.clone()).unwrap();
    let ex = c.complete_chat(req).await.unwrap();
    assert_eq!(inner.calls(), 1);
    assert_eq!(c.stats().cache_hits, 1);
    let stored = cache.get(&ex.cache_key).unwrap().unwrap();
    assert_eq!(serde_json::to_vec(&stored).unwrap(), serde_json::to_vec(&ex).unwrap());
}

/// A chat-completions server that fails the first `fail` calls with `status`.
async fn flaky_server(fail: usize, status: StatusCode, retry_after: Option<&'static str>) -> (String, Arc<AtomicUsize>) {
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    let app = Router::new().route(
        "/v1/chat/completions",
        post(move |headers: HeaderMap, Json(body): Json<Value>| {
            let counter = counter.clone();
            async move {
                let n = counter.fetch_add(1, Ordering::SeqCst);
                let mut out = HeaderMap::new();
                if n < fail {
                    if let Some(after) = retry_after {
                        out.insert("retry-after", after.parse().unwrap());
                    }
                    return (status, out, Json(json!({"error": "busy"})));
                }
                let auth = headers.get("authorization").and_then(|v| v.to_str().ok()).unwrap_or("").to_string();
                let text = format!("model={} seed={} auth={}", body["model"], body["seed"], auth);
                (
                    StatusCode::OK,
                    out,
                    Json(json!({
                        "choices": [{"message": {"role": "assistant", "content": text}, "finish_reason": "stop"}],
                        "usage": {"prompt_tokens": 5, "completion_tokens": 2}
                    })),
                )
            }
        }),
    );
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    (format!("http://{addr}/v1"), hits)
}

fn http_profile(endpoint: String, attempts: u32) -> BackendProfile {
    BackendProfile {
        name: "remote".into(),
        endpoint,
        model: "answerer-3b".into(),
        temperature: 0.0,
        max_tokens: 8,
        in_flight_limit: 4,
        timeout_ms: 5_000,
        retry: RetryPolicy { max_attempts: attempts, base_backoff_ms: 1, multiplier: 2.0, jitter_ms: 0 },
        vision_capable: false,
        api_key_env: Some("CAPREWARD_TEST_KEY".into()),
    }
}

#[tokio::test]
async fn http_transport_retries_503() {
    std::env::set_var("CAPREWARD_TEST_KEY", "sekret");
    let (endpoint, hits) = flaky_server(2, StatusCode::SERVICE_UNAVAILABLE, None).await;
    let client = BackendClient::new(
        http_profile(endpoint, 3),
        Arc::new(HttpTransport::new()),
        Arc::new(MemoryCache::new()),
    )
    .unwrap();
    let ex = client.complete_chat(ChatRequest::user("hi", 0.0, 8, 99)).await.unwrap();
    assert_eq!(ex.attempt_count, 3);
    assert_eq!(hits.load(Ordering::SeqCst), 3);
    assert_eq!(ex.response.text, "model=\"answerer-3b\" seed=99 auth=Bearer sekret");
    assert_eq!(ex.response.usage.prompt_tokens, 5);

    let again = client.complete_chat(ChatRequest::user("hi", 0.0, 8, 99)).await.unwrap();
    assert_eq!(again, ex);
    assert_eq!(hits.load(Ordering::SeqCst), 3);
}

#[tokio::test]
async fn http_transport_honors_retry_after() {
    let (endpoint, _) = flaky_server(1, StatusCode::TOO_MANY_REQUESTS, Some("1")).await;
    let client = BackendClient::new(
        http_profile(endpoint, 2),
        Arc::new(HttpTransport::new()),
        Arc::new(MemoryCache::new()),
    )
    .unwrap();
    let started = Instant::now();
    let ex = client.complete_chat(ChatRequest::user("hi", 0.0, 8, 1)).await.unwrap();
    assert_eq!(ex.attempt_count, 2);
    assert!(started.elapsed() >= Duration::from_millis(950));
}

#[tokio::test]
async fn http_transport_does_not_retry_400() {
    let (endpoint, hits) = flaky_server(5, StatusCode::BAD_REQUEST, None).await;
    let client = BackendClient::new(
        http_profile(endpoint, 4),
        Arc::new(HttpTransport::new()),
        Arc::new(MemoryCache::new()),
    )
    .unwrap();
    let err = client.complete_chat(ChatRequest::user("hi", 0.0, 8, 1)).await.unwrap_err();
    assert!(matches!(err, BackendError::Permanent { .. }));
    assert_eq!(hits.load(Ordering::SeqCst), 1);
}

#[tokio::test]
async fn unreachable_http_backend_is_unavailable() {
    let client = BackendClient::new(
        http_profile("http://127.0.0.1:9/v1".into(), 2),
        Arc::new(HttpTransport::new()),
        Arc::new(MemoryCache::new()),
    )
    .unwrap();
    assert!(matches!(
        client.complete_chat(ChatRequest::user("hi", 0.0, 8, 1)).await,
        Err(BackendError::Unavailable { .. })
    ));
    assert!(!client.probe().await);
}
