//! Leakage filtering: keep a question only if a vision model answers it
//! reliably with the image and unreliably without it.

use std::collections::HashSet;

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendClient, BackendError, ChatRequest};
use crate::curation::ImageRef;
use crate::mcq::{shuffle_mcq, AnswerRecord, Mcq};
use crate::seed::{derive_seed, SeedPart};
use crate::template::{render_probe_prompt, PromptTemplate, TemplateError, DEFAULT_PROBE_TEMPLATE};

pub const PROBE_TAG: &str = "capreward.probe.v1";
pub const DEFAULT_TAU_IMG: f64 = 0.75;
pub const DEFAULT_TAU_BLIND: f64 = 0.25;
pub const DEFAULT_K_ROUNDS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub k_rounds: usize,
    pub tau_img: f64,
    pub tau_blind: f64,
    pub probe_temperature: f64,
    pub max_probe_tokens: u32,
    pub global_seed: u64,
    pub template_name: String,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            k_rounds: DEFAULT_K_ROUNDS,
            tau_img: DEFAULT_TAU_IMG,
            tau_blind: DEFAULT_TAU_BLIND,
            probe_temperature: 0.7,
            max_probe_tokens: 32,
            global_seed: 0,
            template_name: DEFAULT_PROBE_TEMPLATE.to_string(),
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), FilterError> {
        let bad = |m: &str| Err(FilterError::InvalidConfig(m.to_string()));
        if self.k_rounds == 0 {
            return bad("k_rounds must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.tau_img) || !(0.0..=1.0).contains(&self.tau_blind) {
            return bad("thresholds must lie in [0, 1]");
        }
        if self.tau_img <= self.tau_blind {
            return bad("tau_img must be greater than tau_blind");
        }
        if !(self.probe_temperature.is_finite() && self.probe_temperature >= 0.0) {
            return bad("probe_temperature must be >= 0");
        }
        Ok(())
    }

    pub fn uses_default_thresholds(&self) -> bool {
        self.k_rounds == DEFAULT_K_ROUNDS && self.tau_img == DEFAULT_TAU_IMG && self.tau_blind == DEFAULT_TAU_BLIND
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Image,
    Blind,
}

impl Condition {
    fn tag(self) -> &'static str {
        match self {
            Condition::Image => "image",
            Condition::Blind => "blind",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Keep,
    DropUnanswerable,
    DropLeaky,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterVerdict {
    pub mcq_id: String,
    pub acc_img: f64,
    pub acc_blind: f64,
    pub k_rounds: usize,
    pub decision: Decision,
    pub rounds_img: Vec<AnswerRecord>,
    pub rounds_blind: Vec<AnswerRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeOutcome {
    pub acc_img: f64,
    pub acc_blind: f64,
    pub rounds_img: Vec<AnswerRecord>,
    pub rounds_blind: Vec<AnswerRecord>,
}

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("invalid filter config: {0}")]
    InvalidConfig(String),
    #[error("prober `{0}` is not vision-capable")]
    NotVisionCapable(String),
    #[error("invalid question: {0}")]
    Validation(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("probe of `{mcq_id}` ({condition:?} round {round}) failed: {source}")]
    Probe {
        mcq_id: String,
        condition: Condition,
        round: usize,
        #[source]
        source: BackendError,
    },
}

/// Seed of one probe presentation: [`derive_seed`] under [`PROBE_TAG`] over
/// `(global_seed, mcq_id, condition, round)`.
pub fn probe_seed(global_seed: u64, mcq_id: &str, condition: Condition, round: usize) -> u64 {
    derive_seed(
        PROBE_TAG,
        &[
            SeedPart::U64(global_seed),
            SeedPart::Str(mcq_id),
            SeedPart::Str(condition.tag()),
            SeedPart::U64(round as u64),
        ],
    )
}

/// Ask the prober `K` shuffled presentations of `mcq` with the image attached
/// and `K` without, using the same prompt text for both.
pub async fn probe_question(
    mcq: &Mcq,
    image: &ImageRef,
    config: &FilterConfig,
    template: &PromptTemplate,
    prober: &BackendClient,
) -> Result<ProbeOutcome, FilterError> {
    config.validate()?;
    if !prober.profile().vision_capable {
        return Err(FilterError::NotVisionCapable(prober.profile().name.clone()));
    }
    mcq.validate().map_err(|e| FilterError::Validation(e.to_string()))?;

    let mut jobs = Vec::with_capacity(2 * config.k_rounds);
    for condition in [Condition::Image, Condition::Blind] {
        for round in 0..config.k_rounds {
            let seed = probe_seed(config.global_seed, &mcq.id, condition, round);
            let smcq = shuffle_mcq(mcq, seed);
            let prompt = render_probe_prompt(&smcq, template)?;
            let mut request = ChatRequest::user(prompt, config.probe_temperature, config.max_probe_tokens, seed);
            if condition == Condition::Image {
                request = request.with_image(image.uri.clone());
            }
            jobs.push((condition, round, smcq, request));
        }
    }

    let outcomes = futures::future::join_all(jobs.into_iter().map(|(condition, round, smcq, request)| async move {
        (condition, round, smcq, prober.complete_chat(request).await)
    }))
    .await;

    let mut rounds_img = Vec::with_capacity(config.k_rounds);
    let mut rounds_blind = Vec::with_capacity(config.k_rounds);
    for (condition, round, smcq, result) in outcomes {
        let exchange = result.map_err(|source| FilterError::Probe {
            mcq_id: mcq.id.clone(),
            condition,
            round,
            source,
        })?;
        let record = AnswerRecord::evaluate(exchange.response.text, &smcq);
        match condition {
            Condition::Image => rounds_img.push(record),
            Condition::Blind => rounds_blind.push(record),
        }
    }
    let accuracy = |rs: &[AnswerRecord]| rs.iter().filter(|r| r.correct).count() as f64 / rs.len() as f64;
    Ok(ProbeOutcome {
        acc_img: accuracy(&rounds_img),
        acc_blind: accuracy(&rounds_blind),
        rounds_img,
        rounds_blind,
    })
}

/// Keep iff `acc_img >= tau_img` and `acc_blind <= tau_blind`. Otherwise an
/// image accuracy below threshold is reported first.
pub fn decide(acc_img: f64, acc_blind: f64, config: &FilterConfig) -> Decision {
    if acc_img < config.tau_img {
        Decision::DropUnanswerable
    } else if acc_blind > config.tau_blind {
        Decision::DropLeaky
    } else {
        Decision::Keep
    }
}

/// Probe and decide one question.
pub async fn judge_question(
    mcq: &Mcq,
    image: &ImageRef,
    config: &FilterConfig,
    template: &PromptTemplate,
    prober: &BackendClient,
) -> Result<FilterVerdict, FilterError> {
    let probe = probe_question(mcq, image, config, template, prober).await?;
    Ok(FilterVerdict {
        mcq_id: mcq.id.clone(),
        decision: decide(probe.acc_img, probe.acc_blind, config),
        acc_img: probe.acc_img,
        acc_blind: probe.acc_blind,
        k_rounds: config.k_rounds,
        rounds_img: probe.rounds_img,
        rounds_blind: probe.rounds_blind,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErroredRecord {
    pub mcq_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterSummary {
    pub total: usize,
    pub kept: usize,
    pub dropped_unanswerable: usize,
    pub dropped_leaky: usize,
    pub errored: usize,
    /// `kept / total`, `None` for an empty input.
    pub keep_rate: Option<f64>,
    pub k_rounds: usize,
    pub tau_img: f64,
    pub tau_blind: f64,
    pub global_seed: u64,
    /// Either `artifact_default` or `user_supplied`.
    pub threshold_source: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    pub kept: Vec<(Mcq, FilterVerdict)>,
    pub dropped: Vec<FilterVerdict>,
    pub errored: Vec<ErroredRecord>,
    pub summary: FilterSummary,
}

/// One dataset row: the question and its image, or why the image could not
/// be resolved.
pub type FilterInput = (Mcq, Result<ImageRef, String>);

/// Route every question to exactly one of kept / dropped / errored. Outputs
/// are sorted by question id.
pub async fn filter_qa_set(
    dataset: Vec<FilterInput>,
    config: &FilterConfig,
    template: &PromptTemplate,
    prober: &BackendClient,
) -> Result<FilterOutcome, FilterError> {
    config.validate()?;
    if !prober.profile().vision_capable {
        return Err(FilterError::NotVisionCapable(prober.profile().name.clone()));
    }
    let mut ids = HashSet::new();
    if let Some((dup, _)) = dataset.iter().find(|(m, _)| !ids.insert(m.id.clone())) {
        return Err(FilterError::Validation(format!("duplicate question id `{}`", dup.id)));
    }

    let total = dataset.len();
    let concurrency = prober.profile().in_flight_limit.max(1);
    let mut results: Vec<(Mcq, Result<FilterVerdict, String>)> = stream::iter(dataset)
        .map(|(mcq, image)| async move {
            let verdict = match image {
                Ok(image) => judge_question(&mcq, &image, config, template, prober)
                    .await
                    .map_err(|e| e.to_string()),
                Err(reason) => Err(reason),
            };
            (mcq, verdict)
        })
        .buffer_unordered(concurrency)
        .collect()
        .await;
    results.sort_by(|a, b| a.0.id.cmp(&b.0.id));

    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    let mut errored = Vec::new();
    for (mcq, verdict) in results {
        match verdict {
            Ok(v) if v.decision == Decision::Keep => kept.push((mcq, v)),
            Ok(v) => dropped.push(v),
            Err(error) => errored.push(ErroredRecord { mcq_id: mcq.id, error }),
        }
    }
    let count = |d: Decision| dropped.iter().filter(|v| v.decision == d).count();
    let summary = FilterSummary {
        total,
        kept: kept.len(),
        dropped_unanswerable: count(Decision::DropUnanswerable),
        dropped_leaky: count(Decision::DropLeaky),
        errored: errored.len(),
        keep_rate: (total > 0).then(|| kept.len() as f64 / total as f64),
        k_rounds: config.k_rounds,
        tau_img: config.tau_img,
        tau_blind: config.tau_blind,
        global_seed: config.global_seed,
        threshold_source: if config.uses_default_thresholds() { "artifact_default" } else { "user_supplied" }
            .to_string(),
    };
    Ok(FilterOutcome { kept, dropped, errored, summary })
}
