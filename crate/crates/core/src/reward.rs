//! Caption rewards: the mean exact-match accuracy of a text-only answerer
//! over `N` shuffled question presentations, and group scoring on top.

use std::collections::HashSet;

use futures::future::join_all;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendClient, BackendError, ChatRequest};
use crate::grpo::{compute_group_advantages, GroupAdvantage, GrpoError};
use crate::mcq::{shuffle_mcq, AnswerRecord, Mcq};
use crate::seed::{derive_seed, SeedPart, SplitMix64};
use crate::template::{render_answer_prompt, PromptTemplate, TemplateError, DEFAULT_ANSWER_TEMPLATE};

pub const PLAN_TAG: &str = "capreward.plan.v1";
pub const ROUND_TAG: &str = "capreward.round.v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// Cycle the whole question set before repeating; the remainder is drawn
    /// without replacement.
    #[default]
    CoverageFirst,
    WithReplacement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub n_rounds: usize,
    pub sampling_mode: SamplingMode,
    pub global_seed: u64,
    pub answer_temperature: f64,
    pub max_answer_tokens: u32,
    pub template_name: String,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            n_rounds: 4,
            sampling_mode: SamplingMode::CoverageFirst,
            global_seed: 0,
            answer_temperature: 0.0,
            max_answer_tokens: 32,
            template_name: DEFAULT_ANSWER_TEMPLATE.to_string(),
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), RewardError> {
        if self.n_rounds == 0 {
            return Err(RewardError::InvalidConfig("n_rounds must be >= 1".into()));
        }
        if !(self.answer_temperature.is_finite() && self.answer_temperature >= 0.0) {
            return Err(RewardError::InvalidConfig("answer_temperature must be >= 0".into()));
        }
        if self.max_answer_tokens == 0 {
            return Err(RewardError::InvalidConfig("max_answer_tokens must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionSample {
    pub caption_id: String,
    pub image_id: String,
    pub text: String,
    pub rollout_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannedRound {
    pub round_index: usize,
    pub question_id: String,
    pub instance_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round_index: usize,
    pub mcq_id: String,
    pub instance_seed: u64,
    pub answer: AnswerRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardReport {
    pub caption_id: String,
    pub n_rounds: usize,
    pub rounds: Vec<RoundRecord>,
    pub reward: f64,
}

impl RewardReport {
    pub fn correct_rounds(&self) -> usize {
        self.rounds.iter().filter(|r| r.answer.correct).count()
    }
}

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("question set is empty")]
    EmptyQuestionSet,
    #[error("invalid reward config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("invalid scoring request: {0}")]
    Validation(String),
    #[error(transparent)]
    Grpo(#[from] GrpoError),
    #[error("caption `{caption_id}` round {round_index} (question `{mcq_id}`) failed: {source}")]
    Round {
        caption_id: String,
        round_index: usize,
        mcq_id: String,
        #[source]
        source: Box<BackendError>,
    },
}

/// Seed of one question presentation: [`derive_seed`] under [`ROUND_TAG`]
/// over `(global_seed, caption_id, round_index, question_id)`.
pub fn instance_seed(global_seed: u64, caption_id: &str, round_index: usize, question_id: &str) -> u64 {
    derive_seed(
        ROUND_TAG,
        &[
            SeedPart::U64(global_seed),
            SeedPart::Str(caption_id),
            SeedPart::U64(round_index as u64),
            SeedPart::Str(question_id),
        ],
    )
}

/// Choose which question each of the `N` rounds presents.
///
/// Question draws come from a [`SplitMix64`] seeded with [`derive_seed`]
/// under [`PLAN_TAG`] over `(global_seed, caption_id)`. Coverage-first plans
/// list `⌊N/M⌋` full passes in input order, then `N mod M` questions picked
/// by a partial Fisher-Yates (`j = i + below(M - i)`). With-replacement plans
/// take `N` draws of `below(M)`.
pub fn plan_rounds(
    question_ids: &[String],
    config: &RewardConfig,
    caption_id: &str,
) -> Result<Vec<PlannedRound>, RewardError> {
    let m = question_ids.len();
    if m == 0 {
        return Err(RewardError::EmptyQuestionSet);
    }
    config.validate()?;
    let n = config.n_rounds;
    let mut rng = SplitMix64::new(derive_seed(
        PLAN_TAG,
        &[SeedPart::U64(config.global_seed), SeedPart::Str(caption_id)],
    ));

    let picks: Vec<usize> = match config.sampling_mode {
        SamplingMode::CoverageFirst => {
            let mut picks: Vec<usize> = (0..n / m).flat_map(|_| 0..m).collect();
            let mut pool: Vec<usize> = (0..m).collect();
            for i in 0..n % m {
                let j = i + rng.below((m - i) as u64) as usize;
                pool.swap(i, j);
            }
            picks.extend_from_slice(&pool[..n % m]);
            picks
        }
        SamplingMode::WithReplacement => (0..n).map(|_| rng.below(m as u64) as usize).collect(),
    };

    Ok(picks
        .into_iter()
        .enumerate()
        .map(|(round_index, q)| {
            let question_id = question_ids[q].clone();
            PlannedRound {
                round_index,
                instance_seed: instance_seed(config.global_seed, caption_id, round_index, &question_id),
                question_id,
            }
        })
        .collect())
}

fn check_questions(questions: &[Mcq], image_id: &str) -> Result<(), RewardError> {
    if questions.is_empty() {
        return Err(RewardError::EmptyQuestionSet);
    }
    crate::mcq::validate_set(questions).map_err(|e| RewardError::Validation(e.to_string()))?;
    if let Some(q) = questions.iter().find(|q| q.image_id != image_id) {
        return Err(RewardError::Validation(format!(
            "question `{}` belongs to image `{}`, not `{image_id}`",
            q.id, q.image_id
        )));
    }
    Ok(())
}

/// Score one caption. Rounds run concurrently (bounded by the answerer's
/// in-flight limit) and are reported in round order. If any round fails,
/// the lowest-indexed failure is returned and no reward is produced.
pub async fn score_caption(
    caption: &CaptionSample,
    questions: &[Mcq],
    config: &RewardConfig,
    template: &PromptTemplate,
    answerer: &BackendClient,
) -> Result<RewardReport, RewardError> {
    check_questions(questions, &caption.image_id)?;
    score_checked(caption, questions, config, template, answerer).await
}

async fn score_checked(
    caption: &CaptionSample,
    questions: &[Mcq],
    config: &RewardConfig,
    template: &PromptTemplate,
    answerer: &BackendClient,
) -> Result<RewardReport, RewardError> {
    let ids: Vec<String> = questions.iter().map(|q| q.id.clone()).collect();
    let plan = plan_rounds(&ids, config, &caption.caption_id)?;

    let mut prepared = Vec::with_capacity(plan.len());
    for round in &plan {
        let mcq = questions.iter().find(|q| q.id == round.question_id).expect("planned from these ids");
        let smcq = shuffle_mcq(mcq, round.instance_seed);
        let prompt = render_answer_prompt(&caption.text, &smcq, template)?;
        let request = ChatRequest::user(prompt, config.answer_temperature, config.max_answer_tokens, round.instance_seed);
        prepared.push((round, smcq, request));
    }

    let outcomes = join_all(prepared.into_iter().map(|(round, smcq, request)| async move {
        let result = answerer.complete_chat(request).await;
        (round, smcq, result)
    }))
    .await;

    let mut rounds = Vec::with_capacity(outcomes.len());
    for (round, smcq, result) in outcomes {
        let exchange = result.map_err(|source| RewardError::Round {
            caption_id: caption.caption_id.clone(),
            round_index: round.round_index,
            mcq_id: round.question_id.clone(),
            source: Box::new(source),
        })?;
        rounds.push(RoundRecord {
            round_index: round.round_index,
            mcq_id: round.question_id.clone(),
            instance_seed: round.instance_seed,
            answer: AnswerRecord::evaluate(exchange.response.text, &smcq),
        });
    }

    let correct = rounds.iter().filter(|r| r.answer.correct).count();
    Ok(RewardReport {
        caption_id: caption.caption_id.clone(),
        n_rounds: rounds.len(),
        reward: correct as f64 / rounds.len() as f64,
        rounds,
    })
}

/// Score a rollout group for one image and normalize its rewards.
/// Reports and advantages are ordered by `rollout_index`.
pub async fn score_group(
    group_id: &str,
    captions: &[CaptionSample],
    questions: &[Mcq],
    config: &RewardConfig,
    template: &PromptTemplate,
    answerer: &BackendClient,
    epsilon: f64,
) -> Result<(Vec<RewardReport>, GroupAdvantage), RewardError> {
    let first = captions
        .first()
        .ok_or_else(|| RewardError::Validation("caption group is empty".into()))?;
    if let Some(c) = captions.iter().find(|c| c.image_id != first.image_id) {
        return Err(RewardError::Validation(format!(
            "caption `{}` has image `{}`, group image is `{}`",
            c.caption_id, c.image_id, first.image_id
        )));
    }
    let mut seen = HashSet::new();
    if let Some(c) = captions.iter().find(|c| !seen.insert(c.caption_id.as_str())) {
        return Err(RewardError::Validation(format!("duplicate caption_id `{}`", c.caption_id)));
    }
    let mut seen = HashSet::new();
    if let Some(c) = captions.iter().find(|c| !seen.insert(c.rollout_index)) {
        return Err(RewardError::Validation(format!("duplicate rollout_index {}", c.rollout_index)));
    }
    config.validate()?;
    check_questions(questions, &first.image_id)?;

    let mut ordered: Vec<&CaptionSample> = captions.iter().collect();
    ordered.sort_by_key(|c| c.rollout_index);

    let results = join_all(
        ordered
            .iter()
            .map(|c| score_checked(c, questions, config, template, answerer)),
    )
    .await;
    let reports = results.into_iter().collect::<Result<Vec<_>, _>>()?;

    let rewards: Vec<f64> = reports.iter().map(|r| r.reward).collect();
    let advantage = compute_group_advantages(&rewards, epsilon)?.with_group_id(group_id);
    Ok((reports, advantage))
}
