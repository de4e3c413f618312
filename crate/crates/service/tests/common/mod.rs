#![allow(dead_code)]

use std::sync::Arc;
use std::time::Duration;

use capreward_core::backend::mock::{Fallback, KeywordAnswerer};
use capreward_core::backend::{BackendClient, BackendProfile, BackendRegistry, MemoryCache, ResponseCache, Transport};
use capreward_core::{Mcq, PromptTemplate};
use capreward_service::config::BUILTIN_MOCK;
use capreward_service::{serve, AppState, CaptionWire, RewardRequestWire, ServiceConfig};
use tokio::net::TcpListener;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

pub const IMAGE: &str = "img0";

pub fn token(q: usize, o: usize) -> String {
    format!("t{q}x{o}z")
}

/// `m` four-option questions with a fixed spread of correct indices.
pub fn questions(image_id: &str, m: usize) -> Vec<Mcq> {
    (0..m)
        .map(|q| Mcq {
            id: format!("{image_id}-q{q}"),
            image_id: image_id.to_string(),
            stem: format!("Which marker belongs to slot {q}?"),
            options: (0..4).map(|o| token(q, o)).collect(),
            correct_index: (q * 3 + 1) % 4,
            provenance: "fixture".into(),
        })
        .collect()
}

/// Caption naming the correct option for the questions whose bit is set in
/// `mask` and a wrong option for the rest.
pub fn caption(questions: &[Mcq], mask: u32) -> String {
    let mut words = vec!["the photo shows".to_string()];
    for (i, q) in questions.iter().enumerate() {
        if mask >> i & 1 == 1 {
            words.push(q.correct_text().to_string());
        } else {
            words.push(q.options[(q.correct_index + 1) % 4].clone());
        }
    }
    words.join(" and ")
}

pub fn group(group_id: &str, questions: &[Mcq], masks: &[u32]) -> RewardRequestWire {
    RewardRequestWire {
        group_id: group_id.to_string(),
        image_id: questions[0].image_id.clone(),
        captions: masks
            .iter()
            .enumerate()
            .map(|(i, &m)| CaptionWire {
                caption_id: format!("{group_id}-c{i}"),
                text: caption(questions, m),
                rollout_index: i,
            })
            .collect(),
        n_rounds: None,
        seed: None,
        question_set: None,
    }
}

pub fn keyword_transport() -> Arc<dyn Transport> {
    Arc::new(KeywordAnswerer::new(PromptTemplate::default_answer(), Fallback::Abstain))
}

pub fn client(profile: BackendProfile, transport: Arc<dyn Transport>, cache: Arc<dyn ResponseCache>) -> BackendClient {
    BackendClient::new(profile, transport, cache).unwrap()
}

pub struct Harness {
    pub config: ServiceConfig,
    pub cache: Arc<dyn ResponseCache>,
    pub registry: BackendRegistry,
}

impl Harness {
    /// Keyword answerer under the built-in name, sharing one memory cache.
    pub fn new() -> Self {
        Self::with_answerer(keyword_transport())
    }

    pub fn with_answerer(transport: Arc<dyn Transport>) -> Self {
        let cache: Arc<dyn ResponseCache> = Arc::new(MemoryCache::new());
        let mut registry = BackendRegistry::default();
        registry.insert(client(BackendProfile::mock_keyword(BUILTIN_MOCK), transport, cache.clone()));
        Harness { config: ServiceConfig::default(), cache, registry }
    }

    pub fn add_backend(&mut self, profile: BackendProfile, transport: Arc<dyn Transport>) {
        self.config.backends.push(profile.clone());
        self.registry.insert(client(profile, transport, self.cache.clone()));
    }

    pub fn state(self) -> AppState {
        let mut state = AppState::with_registry(&self.config, self.registry, self.cache).unwrap();
        state.register_questions(IMAGE, questions(IMAGE, 5));
        state
    }
}

pub struct Running {
    pub base: String,
    pub state: Arc<AppState>,
    stop: Option<oneshot::Sender<()>>,
    pub task: JoinHandle<std::io::Result<()>>,
}

impl Running {
    pub fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    pub fn stop(&mut self) {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
    }
}

pub async fn spawn(state: AppState) -> Running {
    spawn_with_drain(state, Duration::from_secs(10)).await
}

pub async fn spawn_with_drain(state: AppState, drain: Duration) -> Running {
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    let state = Arc::new(state);
    let (tx, rx) = oneshot::channel::<()>();
    let task = tokio::spawn(serve(
        listener,
        state.clone(),
        async move {
            let _ = rx.await;
        },
        drain,
    ));
    Running { base, state, stop: Some(tx), task }
}

/// Value of an unlabelled or single-labelled metric line.
pub fn metric(text: &str, series: &str) -> u64 {
    text.lines()
        .find_map(|l| l.strip_prefix(series).and_then(|rest| rest.strip_prefix(' ')))
        .unwrap_or_else(|| panic!("metric {series} missing from\n{text}"))
        .parse()
        .unwrap()
}
