#![allow(dead_code)]

use std::sync::Arc;

use capreward_core::backend::mock::{Fallback, KeywordAnswerer};
use capreward_core::backend::{BackendClient, BackendProfile, MemoryCache, Transport};
use capreward_core::mcq::{Mcq, ShuffledMcq};
use capreward_core::PromptTemplate;
use rand::Rng;

/// Option text for question `q`, option `o`. No token is a substring of
/// another, nor of the filler words used in captions.
pub fn token(q: usize, o: usize) -> String {
    format!("t{q}x{o}z")
}

pub fn questions(image_id: &str, m: usize, n_opts: usize, rng: &mut impl Rng) -> Vec<Mcq> {
    (0..m)
        .map(|q| Mcq {
            id: format!("{image_id}-q{q}"),
            image_id: image_id.to_string(),
            stem: format!("Which marker belongs to slot {q}?"),
            options: (0..n_opts).map(|o| token(q, o)).collect(),
            correct_index: rng.random_range(0..n_opts),
            provenance: "fixture".into(),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coverage {
    /// Caption mentions only the correct option.
    Answerable,
    /// Caption mentions exactly one wrong option.
    Distracted,
    /// Caption mentions no option.
    Blank,
    /// Caption mentions the correct option and a wrong one.
    Ambiguous,
}

impl Coverage {
    pub fn random(rng: &mut impl Rng) -> Self {
        match rng.random_range(0..4) {
            0 => Coverage::Answerable,
            1 => Coverage::Distracted,
            2 => Coverage::Blank,
            _ => Coverage::Ambiguous,
        }
    }
}

pub fn caption_for(questions: &[Mcq], coverage: &[Coverage]) -> String {
    let mut words = vec!["the photo shows".to_string()];
    for (q, c) in questions.iter().zip(coverage) {
        let wrong = (q.correct_index + 1) % q.options.len();
        match c {
            Coverage::Answerable => words.push(q.correct_text().to_string()),
            Coverage::Distracted => words.push(q.options[wrong].clone()),
            Coverage::Blank => {}
            Coverage::Ambiguous => {
                words.push(q.correct_text().to_string());
                words.push(q.options[wrong].clone());
            }
        }
        words.push("and".into());
    }
    words.join(" ")
}

/// What the keyword mock must score for one presentation, derived from the
/// caption text and the shuffled option layout only.
pub fn keyword_oracle(caption: &str, smcq: &ShuffledMcq, fallback: Fallback) -> bool {
    let present: Vec<char> = smcq
        .labeled_options
        .iter()
        .filter(|o| caption.contains(o.text.as_str()))
        .map(|o| o.label)
        .collect();
    let chosen = match (present.as_slice(), fallback) {
        ([only], _) => Some(*only),
        (_, Fallback::FirstLabel) => Some('A'),
        (_, Fallback::Abstain) => None,
    };
    chosen == Some(smcq.correct_label)
}

pub fn client_with(transport: Arc<dyn Transport>, profile: BackendProfile) -> BackendClient {
    BackendClient::new(profile, transport, Arc::new(MemoryCache::new())).unwrap()
}

pub fn keyword_client(fallback: Fallback) -> BackendClient {
    client_with(
        Arc::new(KeywordAnswerer::new(PromptTemplate::default_answer(), fallback)),
        BackendProfile::mock_keyword("answerer"),
    )
}

pub fn vision_profile(name: &str) -> BackendProfile {
    BackendProfile { vision_capable: true, model: format!("{name}-model"), ..BackendProfile::mock_keyword(name) }
}
