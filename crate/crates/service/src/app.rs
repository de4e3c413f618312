use std::collections::BTreeMap;
use std::future::{Future, IntoFuture};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Request, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use capreward_core::backend::{DirCache, MemoryCache, ResponseCache};
use capreward_core::backend::BackendRegistry;
use capreward_core::filtering::{judge_question, FilterError};
use capreward_core::reward::RewardError;
use capreward_core::{
    score_group, BackendClient, BackendError, CaptionSample, FilterConfig, ImageRef, Mcq, PromptTemplate,
    RewardConfig, ENGINE_VERSION,
};
use serde::Serialize;
use tokio::net::TcpListener;
use tokio::sync::Semaphore;

use crate::config::{load_images, load_question_sets, parse_json, ConfigError, ServiceConfig};
use crate::metrics::{Endpoint, Metrics};
use crate::wire::{
    BackendHealth, CacheStats, ConfigEcho, ErrorBody, ErrorDetail, FilterRequestWire, FilterResponseWire,
    HealthBody, QuestionSetRef, RewardRequestWire, RewardResponseWire,
};

pub const REQUEST_ID_HEADER: &str = "x-request-id";
pub const TIMING_HEADER: &str = "x-timing-ms";

/// Everything a handler needs; shared read-only across requests.
pub struct AppState {
    registry: BackendRegistry,
    cache: Arc<dyn ResponseCache>,
    answerer: String,
    prober: Option<String>,
    reward: RewardConfig,
    filter: FilterConfig,
    epsilon: f64,
    answer_template: PromptTemplate,
    probe_template: PromptTemplate,
    question_sets: BTreeMap<String, Vec<Mcq>>,
    images: BTreeMap<String, ImageRef>,
    admission: Arc<Semaphore>,
    bearer_token: Option<String>,
    pub metrics: Metrics,
}

impl AppState {
    /// Build clients, cache and data from a validated config. The bearer
    /// token, when configured, is read from its environment variable here.
    pub fn from_config(config: &ServiceConfig) -> Result<Self, ConfigError> {
        let cache: Arc<dyn ResponseCache> = match &config.cache_dir {
            Some(dir) => Arc::new(DirCache::open(dir).map_err(|e| ConfigError::Invalid(e.to_string()))?),
            None => Arc::new(MemoryCache::new()),
        };
        let registry = BackendRegistry::from_profiles(config.profiles(), cache.clone())
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let question_sets = load_question_sets(&config.question_sets)?;
        let images = load_images(&config.image_manifests)?;
        let mut state = Self::with_registry(config, registry, cache)?;
        state.question_sets = question_sets;
        state.images = images;
        if let Some(var) = &config.bearer_token_env {
            let token = std::env::var(var)
                .map_err(|_| ConfigError::Invalid(format!("bearer token variable `{var}` is not set")))?;
            state.bearer_token = Some(token);
        }
        Ok(state)
    }

    /// State over an existing registry, with no registered data and no auth.
    pub fn with_registry(
        config: &ServiceConfig,
        registry: BackendRegistry,
        cache: Arc<dyn ResponseCache>,
    ) -> Result<Self, ConfigError> {
        config.validate()?;
        let template = |name: &str| PromptTemplate::builtin(name).map_err(|e| ConfigError::Invalid(e.to_string()));
        for name in std::iter::once(&config.answerer).chain(&config.prober) {
            registry.get(name).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        Ok(AppState {
            answer_template: template(&config.reward.template_name)?,
            probe_template: template(&config.filter.template_name)?,
            registry,
            cache,
            answerer: config.answerer.clone(),
            prober: config.prober.clone(),
            reward: config.reward.clone(),
            filter: config.filter.clone(),
            epsilon: config.epsilon,
            question_sets: BTreeMap::new(),
            images: BTreeMap::new(),
            admission: Arc::new(Semaphore::new(config.admission_limit)),
            bearer_token: None,
            metrics: Metrics::default(),
        })
    }

    pub fn register_questions(&mut self, image_id: impl Into<String>, questions: Vec<Mcq>) {
        self.question_sets.insert(image_id.into(), questions);
    }

    pub fn register_image(&mut self, image: ImageRef) {
        self.images.insert(image.image_id.clone(), image);
    }

    pub fn set_bearer_token(&mut self, token: Option<String>) {
        self.bearer_token = token;
    }

    pub fn registry(&self) -> &BackendRegistry {
        &self.registry
    }

    pub fn reward_config(&self) -> &RewardConfig {
        &self.reward
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn answer_template(&self) -> &PromptTemplate {
        &self.answer_template
    }

    pub fn answerer(&self) -> &BackendClient {
        self.registry.get(&self.answerer).expect("checked at construction")
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let api = Router::new()
        .route("/v1/reward", post(handle_reward))
        .route("/v1/filter", post(handle_filter))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_bearer));
    Router::new()
        .merge(api)
        .route("/health", get(handle_health))
        .route("/metrics", get(handle_metrics))
        .layer(middleware::from_fn(request_id))
        .with_state(state)
}

/// Serve until `shutdown` resolves, then let in-flight requests finish for
/// at most `drain`.
pub async fn serve(
    listener: TcpListener,
    state: Arc<AppState>,
    shutdown: impl Future<Output = ()> + Send + 'static,
    drain: Duration,
) -> std::io::Result<()> {
    let (tx, mut rx) = tokio::sync::watch::channel(false);
    let signal = async move {
        shutdown.await;
        let _ = tx.send(true);
    };
    let server = axum::serve(listener, router(state)).with_graceful_shutdown(signal).into_future();
    let deadline = async move {
        if rx.wait_for(|fired| *fired).await.is_err() {
            std::future::pending::<()>().await;
        }
        tokio::time::sleep(drain).await;
    };
    tokio::select! {
        result = server => result,
        _ = deadline => {
            tracing::warn!(?drain, "drain deadline reached with requests still in flight");
            Ok(())
        }
    }
}

/// Resolves on Ctrl-C or, on Unix, SIGTERM.
pub async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    detail: Box<ErrorDetail>,
    retry_after: Option<u64>,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            detail: Box::new(ErrorDetail {
                code: code.into(),
                message: message.into(),
                field: None,
                caption_id: None,
                round_index: None,
                mcq_id: None,
            }),
            retry_after: None,
        }
    }

    fn field(mut self, field: impl Into<String>) -> Self {
        self.detail.field = Some(field.into());
        self
    }

    fn bad_request(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "invalid_request", message).field(field)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut response = (self.status, json_body(&ErrorBody { error: *self.detail })).into_response();
        if let Some(secs) = self.retry_after {
            response.headers_mut().insert(header::RETRY_AFTER, HeaderValue::from(secs));
        }
        response
    }
}

fn json_body<T: Serialize>(value: &T) -> Response {
    let bytes = serde_json::to_vec(value).expect("wire types serialize");
    ([(header::CONTENT_TYPE, "application/json")], bytes).into_response()
}

fn parse_body<T: serde::de::DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    let text = std::str::from_utf8(body).map_err(|_| ApiError::bad_request(".", "body is not UTF-8"))?;
    parse_json(text, "body").map_err(|d| {
        ApiError::bad_request(d.field, format!("{} (line {}, column {})", d.message, d.line, d.column))
    })
}

fn next_request_id() -> String {
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    static BOOT: std::sync::OnceLock<u64> = std::sync::OnceLock::new();
    let boot = *BOOT.get_or_init(|| SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_nanos() as u64));
    format!("{boot:016x}-{:08x}", COUNTER.fetch_add(1, Ordering::Relaxed))
}

async fn request_id(request: Request, next: Next) -> Response {
    let id = request
        .headers()
        .get(REQUEST_ID_HEADER)
        .and_then(|v| v.to_str().ok())
        .filter(|v| !v.is_empty() && v.len() <= 128)
        .map(str::to_owned)
        .unwrap_or_else(next_request_id);
    let method = request.method().clone();
    let path = request.uri().path().to_owned();
    let mut response = next.run(request).await;
    tracing::debug!(request_id = %id, %method, %path, status = response.status().as_u16(), "request");
    if let Ok(v) = HeaderValue::from_str(&id) {
        response.headers_mut().insert(REQUEST_ID_HEADER, v);
    }
    response
}

async fn require_bearer(State(state): State<Arc<AppState>>, request: Request, next: Next) -> Response {
    if let Some(token) = &state.bearer_token {
        let presented = request
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if presented != Some(token.as_str()) {
            return ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or wrong bearer token")
                .into_response();
        }
    }
    next.run(request).await
}

fn admit(state: &AppState, endpoint: &Endpoint) -> Result<tokio::sync::OwnedSemaphorePermit, ApiError> {
    state.admission.clone().try_acquire_owned().map_err(|_| {
        endpoint.rejected.fetch_add(1, Ordering::Relaxed);
        let mut e = ApiError::new(StatusCode::TOO_MANY_REQUESTS, "overloaded", "admission limit reached");
        e.retry_after = Some(1);
        e
    })
}

fn counted<T>(endpoint: &Endpoint, result: Result<T, ApiError>) -> Result<T, ApiError> {
    if result.is_err() {
        endpoint.errors.fetch_add(1, Ordering::Relaxed);
    }
    result
}

async fn handle_reward(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    let endpoint = &state.metrics.reward;
    endpoint.requests.fetch_add(1, Ordering::Relaxed);
    let _permit = admit(&state, endpoint)?;
    let started = Instant::now();
    let result = counted(endpoint, reward(&state, &body).await);
    let ms = started.elapsed().as_millis() as u64;
    state.metrics.observe_reward_latency(ms);
    let mut response = json_body(&result?);
    response.headers_mut().insert(TIMING_HEADER, HeaderValue::from(ms));
    Ok(response)
}

async fn reward(state: &AppState, body: &[u8]) -> Result<RewardResponseWire, ApiError> {
    let request: RewardRequestWire = parse_body(body)?;
    check_rollouts(&request)?;

    let questions: &[Mcq] = match &request.question_set {
        Some(QuestionSetRef::Inline(qs)) => {
            for (i, q) in qs.iter().enumerate() {
                q.validate().map_err(|e| ApiError::bad_request(format!("question_set.inline[{i}]"), e.to_string()))?;
            }
            qs
        }
        Some(QuestionSetRef::Registered(id)) => registered(state, id)?,
        None => registered(state, &request.image_id)?,
    };

    let mut config = state.reward.clone();
    if let Some(n) = request.n_rounds {
        config.n_rounds = n;
    }
    if let Some(seed) = request.seed {
        config.global_seed = seed;
    }
    if config.n_rounds == 0 {
        return Err(ApiError::bad_request("n_rounds", "n_rounds must be >= 1"));
    }

    let captions: Vec<CaptionSample> = request
        .captions
        .iter()
        .map(|c| CaptionSample {
            caption_id: c.caption_id.clone(),
            image_id: request.image_id.clone(),
            text: c.text.clone(),
            rollout_index: c.rollout_index,
        })
        .collect();
    let (reports, advantage) = score_group(
        &request.group_id,
        &captions,
        questions,
        &config,
        &state.answer_template,
        state.answerer(),
        state.epsilon,
    )
    .await
    .map_err(reward_error)?;

    Ok(RewardResponseWire {
        group_id: request.group_id,
        rewards: advantage.rewards,
        advantages: advantage.advantages,
        reports,
        engine_version: ENGINE_VERSION.to_string(),
        config_echo: ConfigEcho {
            n_rounds: config.n_rounds,
            seed: config.global_seed,
            sampling_mode: config.sampling_mode,
            epsilon: state.epsilon,
            template_name: config.template_name,
            answerer: state.answerer.clone(),
        },
    })
}

fn registered<'a>(state: &'a AppState, id: &str) -> Result<&'a [Mcq], ApiError> {
    state
        .question_sets
        .get(id)
        .map(Vec::as_slice)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown_question_set", format!("no question set registered for `{id}`")))
}

/// Captions must be non-empty with rollout indices exactly `0..G`.
fn check_rollouts(request: &RewardRequestWire) -> Result<(), ApiError> {
    let g = request.captions.len();
    if g == 0 {
        return Err(ApiError::bad_request("captions", "captions must be non-empty"));
    }
    let mut seen = vec![false; g];
    for (i, c) in request.captions.iter().enumerate() {
        let field = format!("captions[{i}].rollout_index");
        if c.rollout_index >= g {
            return Err(ApiError::bad_request(field, format!("rollout_index {} is outside 0..{g}", c.rollout_index)));
        }
        if std::mem::replace(&mut seen[c.rollout_index], true) {
            return Err(ApiError::bad_request(field, format!("duplicate rollout_index {}", c.rollout_index)));
        }
    }
    let mut ids = std::collections::HashSet::new();
    if let Some(i) = request.captions.iter().position(|c| !ids.insert(c.caption_id.as_str())) {
        return Err(ApiError::bad_request(format!("captions[{i}].caption_id"), "duplicate caption_id"));
    }
    Ok(())
}

fn reward_error(e: RewardError) -> ApiError {
    match e {
        RewardError::Round { caption_id, round_index, mcq_id, source } => {
            let (status, code) = backend_status(&source);
            let mut err = ApiError::new(status, code, source.to_string());
            err.detail.caption_id = Some(caption_id);
            err.detail.round_index = Some(round_index);
            err.detail.mcq_id = Some(mcq_id);
            err
        }
        RewardError::EmptyQuestionSet => ApiError::bad_request("question_set", e.to_string()),
        RewardError::Validation(_) | RewardError::InvalidConfig(_) => {
            ApiError::new(StatusCode::BAD_REQUEST, "invalid_request", e.to_string())
        }
        other => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", other.to_string()),
    }
}

fn backend_status(e: &BackendError) -> (StatusCode, &'static str) {
    match e {
        BackendError::Unavailable { .. } => (StatusCode::SERVICE_UNAVAILABLE, "backend_unavailable"),
        BackendError::NotVisionCapable(_) => (StatusCode::SERVICE_UNAVAILABLE, "not_vision_capable"),
        _ => (StatusCode::INTERNAL_SERVER_ERROR, "backend_error"),
    }
}

async fn handle_filter(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    let endpoint = &state.metrics.filter;
    endpoint.requests.fetch_add(1, Ordering::Relaxed);
    let _permit = admit(&state, endpoint)?;
    let result = counted(endpoint, filter(&state, &body).await);
    Ok(json_body(&result?))
}

async fn filter(state: &AppState, body: &[u8]) -> Result<FilterResponseWire, ApiError> {
    let request: FilterRequestWire = parse_body(body)?;
    request.mcq.validate().map_err(|e| ApiError::bad_request("mcq", e.to_string()))?;
    if request.mcq.image_id != request.image_id {
        return Err(ApiError::bad_request("image_id", "image_id differs from mcq.image_id"));
    }

    let mut config = state.filter.clone();
    if let Some(k) = request.k_rounds {
        config.k_rounds = k;
    }
    if let Some(t) = request.tau_img {
        config.tau_img = t;
    }
    if let Some(t) = request.tau_blind {
        config.tau_blind = t;
    }
    if let Some(seed) = request.seed {
        config.global_seed = seed;
    }
    config.validate().map_err(|e| ApiError::bad_request("tau_img", e.to_string()))?;

    let Some(prober_name) = &state.prober else {
        return Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "no_prober", "no vision prober is configured"));
    };
    let prober = state
        .registry
        .get(prober_name)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?;
    if !prober.profile().vision_capable {
        return Err(ApiError::new(
            StatusCode::SERVICE_UNAVAILABLE,
            "not_vision_capable",
            format!("prober `{prober_name}` does not accept images"),
        ));
    }

    let image = match (&request.image_uri, state.images.get(&request.image_id)) {
        (Some(uri), _) => ImageRef {
            image_id: request.image_id.clone(),
            uri: uri.clone(),
            source: "request".into(),
            width: None,
            height: None,
            sha256: String::new(),
        },
        (None, Some(image)) => image.clone(),
        (None, None) => {
            return Err(ApiError::new(
                StatusCode::NOT_FOUND,
                "unknown_image",
                format!("image `{}` is not in any manifest", request.image_id),
            ))
        }
    };

    let verdict = judge_question(&request.mcq, &image, &config, &state.probe_template, prober)
        .await
        .map_err(|e| match e {
            FilterError::Probe { mcq_id, condition, round, source } => {
                let (status, code) = backend_status(&source);
                let mut err = ApiError::new(status, code, format!("{condition:?} probe failed: {source}"));
                err.detail.round_index = Some(round);
                err.detail.mcq_id = Some(mcq_id);
                err
            }
            FilterError::NotVisionCapable(_) => {
                ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "not_vision_capable", e.to_string())
            }
            FilterError::Validation(_) => ApiError::bad_request("mcq", e.to_string()),
            FilterError::InvalidConfig(_) => ApiError::new(StatusCode::BAD_REQUEST, "invalid_request", e.to_string()),
            other => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", other.to_string()),
        })?;

    Ok(FilterResponseWire {
        verdict,
        tau_img: config.tau_img,
        tau_blind: config.tau_blind,
        threshold_source: if config.uses_default_thresholds() { "artifact_default" } else { "user_supplied" }.into(),
        engine_version: ENGINE_VERSION.to_string(),
    })
}

async fn handle_health(State(state): State<Arc<AppState>>) -> Response {
    let probes = futures::future::join_all(state.registry.iter().map(|c| async move {
        BackendHealth {
            name: c.profile().name.clone(),
            model: c.profile().model.clone(),
            vision_capable: c.profile().vision_capable,
            reachable: c.probe().await,
        }
    }));
    let backends = match tokio::time::timeout(Duration::from_secs(1), probes).await {
        Ok(b) => b,
        Err(_) => state
            .registry
            .iter()
            .map(|c| BackendHealth {
                name: c.profile().name.clone(),
                model: c.profile().model.clone(),
                vision_capable: c.profile().vision_capable,
                reachable: false,
            })
            .collect(),
    };
    let stats = state.registry.total_stats();
    let body = HealthBody {
        status: if backends.iter().all(|b| b.reachable) { "ok" } else { "degraded" }.into(),
        engine_version: ENGINE_VERSION.to_string(),
        backends,
        cache_stats: CacheStats { entries: state.cache.len(), hits: stats.cache_hits, misses: stats.cache_misses },
    };
    json_body(&body)
}

async fn handle_metrics(State(state): State<Arc<AppState>>) -> Response {
    (
        [(header::CONTENT_TYPE, "text/plain; version=0.0.4")],
        state.metrics.render(&state.registry),
    )
        .into_response()
}
