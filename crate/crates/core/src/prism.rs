//! Decoupled two-stage evaluation of a captioner: a vision model writes one
//! caption per image, then a text-only answerer solves benchmark questions
//! from the caption alone.

use std::collections::BTreeMap;

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendClient, BackendError, ChatRequest};
use crate::curation::ImageRef;
use crate::mcq::{shuffle_mcq, AnswerRecord, Mcq};
use crate::seed::{derive_seed, SeedPart};
use crate::template::{render_answer_prompt, PromptTemplate, TemplateError, TemplateKind, DEFAULT_ANSWER_TEMPLATE};

pub const EVAL_TAG: &str = "capreward.eval.v1";
pub const CAPTION_TAG: &str = "capreward.caption.v1";

#[derive(Debug, Error)]
pub enum PrismError {
    #[error("captioner `{0}` is not vision-capable")]
    NotVisionCapable(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("invalid eval item `{item_id}`: {reason}")]
    InvalidItem { item_id: String, reason: String },
    #[error("answering item `{item_id}` failed: {source}")]
    Item {
        item_id: String,
        #[source]
        source: BackendError,
    },
    #[error("nothing to aggregate")]
    NoResults,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalItem {
    pub item_id: String,
    pub benchmark: String,
    pub image_id: String,
    pub mcq: Mcq,
}

/// One line of a persisted caption store.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionEntry {
    pub image_id: String,
    pub caption: String,
    pub captioner: String,
    pub prompt_template: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionFailure {
    pub image_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CaptionStageOutput {
    pub captions: BTreeMap<String, String>,
    pub failures: Vec<CaptionFailure>,
}

impl CaptionStageOutput {
    pub fn entries(&self, captioner: &str, template: &str) -> Vec<CaptionEntry> {
        self.captions
            .iter()
            .map(|(image_id, caption)| CaptionEntry {
                image_id: image_id.clone(),
                caption: caption.clone(),
                captioner: captioner.to_string(),
                prompt_template: template.to_string(),
            })
            .collect()
    }
}

/// Stage 1: one caption per image. Per-image backend failures are recorded
/// and the image is left out of the map.
pub async fn run_caption_stage(
    images: &[ImageRef],
    captioner: &BackendClient,
    caption_prompt: &PromptTemplate,
    seed: u64,
) -> Result<CaptionStageOutput, PrismError> {
    caption_prompt.expect_kind(TemplateKind::Caption)?;
    let profile = captioner.profile();
    if !profile.vision_capable {
        return Err(PrismError::NotVisionCapable(profile.name.clone()));
    }
    let outcomes: Vec<(String, Result<String, BackendError>)> = stream::iter(images)
        .map(|image| async move {
            let request_seed = derive_seed(CAPTION_TAG, &[SeedPart::U64(seed), SeedPart::Str(&image.image_id)]);
            let request = ChatRequest::user(caption_prompt.body.clone(), profile.temperature, profile.max_tokens, request_seed)
                .with_image(image.uri.clone());
            let result = captioner.complete_chat(request).await.map(|ex| ex.response.text);
            (image.image_id.clone(), result)
        })
        .buffer_unordered(profile.in_flight_limit.max(1))
        .collect()
        .await;

    let mut out = CaptionStageOutput::default();
    for (image_id, result) in outcomes {
        match result {
            Ok(caption) => {
                out.captions.insert(image_id, caption);
            }
            Err(e) => out.failures.push(CaptionFailure { image_id, error: e.to_string() }),
        }
    }
    out.failures.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub seed: u64,
    pub template_name: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { seed: 0, template_name: DEFAULT_ANSWER_TEMPLATE.to_string(), temperature: 0.0, max_tokens: 32 }
    }
}

pub fn eval_seed(seed: u64, item_id: &str) -> u64 {
    derive_seed(EVAL_TAG, &[SeedPart::U64(seed), SeedPart::Str(item_id)])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemOutcome {
    pub item_id: String,
    pub correct: bool,
    pub instance_seed: u64,
    pub answer: AnswerRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub benchmark: String,
    pub n_items: usize,
    pub per_item: Vec<ItemOutcome>,
    pub accuracy: f64,
    pub captioner_profile: String,
    pub answerer_profile: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExcludedItem {
    pub item_id: String,
    pub benchmark: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AnswerStageOutput {
    /// One entry per benchmark with at least one answered item, sorted by name.
    pub results: Vec<EvalResult>,
    pub excluded: Vec<ExcludedItem>,
}

/// Stage 2: answer every item from its image's caption, once, with a seeded
/// shuffle. The answerer receives text only.
pub async fn run_answer_stage(
    captions: &BTreeMap<String, String>,
    items: &[EvalItem],
    answerer: &BackendClient,
    config: &EvalConfig,
    template: &PromptTemplate,
    captioner_name: &str,
) -> Result<AnswerStageOutput, PrismError> {
    template.expect_kind(TemplateKind::CaptionAnswer)?;
    let mut excluded = Vec::new();
    let mut runnable = Vec::new();
    for item in items {
        if let Err(e) = item.mcq.validate() {
            return Err(PrismError::InvalidItem { item_id: item.item_id.clone(), reason: e.to_string() });
        }
        match captions.get(&item.image_id) {
            Some(caption) => runnable.push((item, caption)),
            None => excluded.push(ExcludedItem {
                item_id: item.item_id.clone(),
                benchmark: item.benchmark.clone(),
                reason: format!("no caption for image `{}`", item.image_id),
            }),
        }
    }

    let mut prepared = Vec::with_capacity(runnable.len());
    for (item, caption) in runnable {
        let seed = eval_seed(config.seed, &item.item_id);
        let smcq = shuffle_mcq(&item.mcq, seed);
        let prompt = render_answer_prompt(caption, &smcq, template)?;
        prepared.push((item, smcq, ChatRequest::user(prompt, config.temperature, config.max_tokens, seed)));
    }
    let concurrency = answerer.profile().in_flight_limit.max(1);
    let outcomes: Vec<_> = stream::iter(prepared)
        .map(|(item, smcq, request)| async move { (item, smcq, answerer.complete_chat(request).await) })
        .buffered(concurrency)
        .collect()
        .await;

    let mut by_benchmark: BTreeMap<&str, Vec<ItemOutcome>> = BTreeMap::new();
    for (item, smcq, result) in outcomes {
        let exchange = result.map_err(|source| PrismError::Item { item_id: item.item_id.clone(), source })?;
        let answer = AnswerRecord::evaluate(exchange.response.text, &smcq);
        by_benchmark.entry(&item.benchmark).or_default().push(ItemOutcome {
            item_id: item.item_id.clone(),
            correct: answer.correct,
            instance_seed: smcq.instance_seed,
            answer,
        });
    }

    let results = by_benchmark
        .into_iter()
        .map(|(benchmark, per_item)| {
            let correct = per_item.iter().filter(|o| o.correct).count();
            EvalResult {
                benchmark: benchmark.to_string(),
                n_items: per_item.len(),
                accuracy: correct as f64 / per_item.len() as f64,
                per_item,
                captioner_profile: captioner_name.to_string(),
                answerer_profile: answerer.profile().name.clone(),
            }
        })
        .collect();
    Ok(AnswerStageOutput { results, excluded })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub benchmark: String,
    pub n_items: usize,
    pub accuracy: f64,
    /// Percentage rounded to one decimal.
    pub display: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub rows: Vec<SummaryRow>,
    /// Unweighted mean of per-benchmark accuracies.
    pub macro_average: f64,
    pub macro_display: String,
}

fn pct(x: f64) -> String {
    format!("{:.1}", x * 100.0)
}

pub fn aggregate(results: &[EvalResult]) -> Result<EvalSummary, PrismError> {
    if results.is_empty() {
        return Err(PrismError::NoResults);
    }
    let mut rows: Vec<SummaryRow> = results
        .iter()
        .map(|r| SummaryRow {
            benchmark: r.benchmark.clone(),
            n_items: r.n_items,
            accuracy: r.accuracy,
            display: pct(r.accuracy),
        })
        .collect();
    rows.sort_by(|a, b| a.benchmark.cmp(&b.benchmark));
    let macro_average = rows.iter().map(|r| r.accuracy).sum::<f64>() / rows.len() as f64;
    Ok(EvalSummary { rows, macro_display: pct(macro_average), macro_average })
}

/// Plain-text table: one row per benchmark, then the macro average.
pub fn render_table(summary: &EvalSummary) -> String {
    let width = summary.rows.iter().map(|r| r.benchmark.len()).max().unwrap_or(0).max("Average".len());
    let mut out = format!("{:<width$}  {:>7}  {:>8}\n", "Benchmark", "Items", "Acc (%)");
    for r in &summary.rows {
        out.push_str(&format!("{:<width$}  {:>7}  {:>8}\n", r.benchmark, r.n_items, r.display));
    }
    out.push_str(&format!("{:<width$}  {:>7}  {:>8}\n", "Average", "", summary.macro_display));
    out
}
