//! QA generation and image-set hygiene.
//!
//! Generation asks a vision backend for numbered question blocks and parses
//! them into validated [`Mcq`]s. Deduplication and benchmark-overlap flagging
//! work on precomputed unit-norm embeddings.

use std::collections::HashSet;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendClient, BackendError, ChatRequest};
use crate::mcq::{Mcq, MAX_OPTIONS, MIN_OPTIONS};
use crate::template::{render_generation_prompt, PromptTemplate, TemplateError, DEFAULT_GENERATION_TEMPLATE};

pub const DEFAULT_DEDUP_THRESHOLD: f64 = 0.92;
const UNIT_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum CurationError {
    #[error("invalid image ref `{id}`: {reason}")]
    InvalidImage { id: String, reason: String },
    #[error("invalid generation spec: {0}")]
    InvalidSpec(String),
    #[error("generator `{0}` is not vision-capable")]
    NotVisionCapable(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("generation for image `{image_id}` failed: {source}")]
    Backend {
        image_id: String,
        #[source]
        source: BackendError,
    },
    #[error("generation for image `{image_id}` produced no usable questions ({rejected} rejected)")]
    NothingParsed { image_id: String, rejected: usize, rejections: Vec<Rejection> },
    #[error("embedding `{image_id}` has dimension {got}, expected {expected}")]
    DimensionMismatch { image_id: String, expected: usize, got: usize },
    #[error("embedding `{image_id}` is not unit-norm (norm {norm})")]
    NotUnitNorm { image_id: String, norm: f64 },
    #[error("duplicate embedding id `{0}`")]
    DuplicateId(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    /// First 16 hex characters of `sha256`.
    pub image_id: String,
    pub uri: String,
    #[serde(default)]
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<u32>,
    pub sha256: String,
}

impl ImageRef {
    /// Build a reference whose id is derived from the digest of `bytes`.
    pub fn from_bytes(bytes: &[u8], uri: impl Into<String>, source: impl Into<String>) -> Self {
        use sha2::{Digest, Sha256};
        let sha256 = hex::encode(Sha256::digest(bytes));
        ImageRef {
            image_id: sha256[..16].to_string(),
            uri: uri.into(),
            source: source.into(),
            width: None,
            height: None,
            sha256,
        }
    }

    pub fn validate(&self) -> Result<(), CurationError> {
        let bad = |reason: &str| CurationError::InvalidImage { id: self.image_id.clone(), reason: reason.to_string() };
        let well_formed = self.sha256.len() == 64
            && self.sha256.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b));
        if !well_formed {
            return Err(bad("sha256 must be 64 lowercase hex characters"));
        }
        if self.image_id != self.sha256[..16] {
            return Err(bad("image_id must equal the first 16 hex characters of sha256"));
        }
        if self.uri.is_empty() {
            return Err(bad("uri is empty"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenSpec {
    pub per_image: usize,
    pub option_count: usize,
    pub template_name: String,
    pub max_tokens: u32,
    pub seed: u64,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            per_image: 5,
            option_count: 4,
            template_name: DEFAULT_GENERATION_TEMPLATE.to_string(),
            max_tokens: 2048,
            seed: 0,
        }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<(), CurationError> {
        if self.per_image == 0 {
            return Err(CurationError::InvalidSpec("per_image must be >= 1".into()));
        }
        if !(MIN_OPTIONS..=MAX_OPTIONS).contains(&self.option_count) {
            return Err(CurationError::InvalidSpec(format!(
                "option_count must be in {MIN_OPTIONS}..={MAX_OPTIONS}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    MissingAnswer,
    AnswerNotAnOption,
    TooFewOptions,
    TooManyOptions,
    OptionCountMismatch,
    NonConsecutiveLabels,
    DuplicateOption,
    EmptyStem,
    OverQuota,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub image_id: String,
    pub block: usize,
    pub reason: RejectReason,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratedQa {
    pub questions: Vec<Mcq>,
    pub rejections: Vec<Rejection>,
}

static QUESTION_LINE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\s*(?:\*\*)?(?:Q(?:uestion)?\s*)?(\d+)\s*[.):]\s*(?:\*\*)?\s*(.*)$").unwrap());
static OPTION_LINE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\s*\(?([A-Ha-h])[.)]\s+(.+?)\s*$").unwrap());
static ANSWER_LINE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)^\s*(?:\*\*)?(?:correct\s+)?answer\s*(?:\*\*)?\s*[:：]\s*(?:\*\*)?\s*\(?([A-H])\b").unwrap()
});

#[derive(Debug, Default)]
struct Block {
    number: usize,
    stem: String,
    options: Vec<(char, String)>,
    answer: Option<char>,
}

/// Parse generator output laid out as
///
/// ```text
/// 1. <question>
/// A. <option>
/// B. <option>
/// Answer: <letter>
/// ```
///
/// Blocks start at a numbered line. Stem continuation lines before the first
/// option are appended to the stem. Each block is validated on its own.
pub fn parse_generated_questions(
    raw: &str,
    image_id: &str,
    spec: &GenSpec,
    provenance: &str,
) -> GeneratedQa {
    let mut blocks: Vec<Block> = Vec::new();
    for line in raw.lines() {
        if let Some(c) = ANSWER_LINE.captures(line) {
            if let Some(b) = blocks.last_mut() {
                b.answer = c[1].chars().next();
            }
            continue;
        }
        if let Some(c) = OPTION_LINE.captures(line) {
            if let Some(b) = blocks.last_mut() {
                let label = c[1].chars().next().unwrap().to_ascii_uppercase();
                b.options.push((label, c[2].to_string()));
                continue;
            }
        }
        if let Some(c) = QUESTION_LINE.captures(line) {
            blocks.push(Block {
                number: c[1].parse().unwrap_or(blocks.len() + 1),
                stem: c[2].trim().to_string(),
                ..Default::default()
            });
            continue;
        }
        if let Some(b) = blocks.last_mut() {
            if b.options.is_empty() && !line.trim().is_empty() {
                if !b.stem.is_empty() {
                    b.stem.push(' ');
                }
                b.stem.push_str(line.trim());
            }
        }
    }

    let mut questions = Vec::new();
    let mut rejections = Vec::new();
    let mut ids = HashSet::new();
    for (i, block) in blocks.into_iter().enumerate() {
        let reject = |reason, detail: String| Rejection { image_id: image_id.to_string(), block: i + 1, reason, detail };
        match build_mcq(block, image_id, spec, provenance) {
            Ok(mcq) if questions.len() >= spec.per_image => {
                rejections.push(reject(RejectReason::OverQuota, format!("question `{}` beyond per_image", mcq.id)));
            }
            Ok(mut mcq) => {
                while !ids.insert(mcq.id.clone()) {
                    mcq.id.push('_');
                }
                questions.push(mcq);
            }
            Err((reason, detail)) => rejections.push(reject(reason, detail)),
        }
    }
    GeneratedQa { questions, rejections }
}

fn build_mcq(block: Block, image_id: &str, spec: &GenSpec, provenance: &str) -> Result<Mcq, (RejectReason, String)> {
    if block.stem.is_empty() {
        return Err((RejectReason::EmptyStem, "question text is empty".into()));
    }
    let n = block.options.len();
    if n < MIN_OPTIONS {
        return Err((RejectReason::TooFewOptions, format!("{n} options")));
    }
    if n > MAX_OPTIONS {
        return Err((RejectReason::TooManyOptions, format!("{n} options")));
    }
    if let Some((pos, (label, _))) = block
        .options
        .iter()
        .enumerate()
        .find(|(pos, (label, _))| *label != crate::mcq::label_for(*pos))
    {
        return Err((RejectReason::NonConsecutiveLabels, format!("label {label} at position {pos}")));
    }
    if n != spec.option_count {
        return Err((RejectReason::OptionCountMismatch, format!("{n} options, expected {}", spec.option_count)));
    }
    let Some(answer) = block.answer else {
        return Err((RejectReason::MissingAnswer, "no answer line".into()));
    };
    let Some(correct_index) = block.options.iter().position(|(l, _)| *l == answer) else {
        return Err((RejectReason::AnswerNotAnOption, format!("answer {answer}")));
    };
    let mcq = Mcq {
        id: format!("{image_id}-q{}", block.number),
        image_id: image_id.to_string(),
        stem: block.stem,
        options: block.options.into_iter().map(|(_, t)| t).collect(),
        correct_index,
        provenance: provenance.to_string(),
    };
    match mcq.validate() {
        Ok(()) => Ok(mcq),
        Err(crate::mcq::McqError::DuplicateOption { text, .. }) => Err((RejectReason::DuplicateOption, text)),
        Err(e) => Err((RejectReason::TooFewOptions, e.to_string())),
    }
}

/// Ask a vision backend for questions about one image.
pub async fn generate_qa(
    image: &ImageRef,
    spec: &GenSpec,
    template: &PromptTemplate,
    generator: &BackendClient,
) -> Result<GeneratedQa, CurationError> {
    spec.validate()?;
    if !generator.profile().vision_capable {
        return Err(CurationError::NotVisionCapable(generator.profile().name.clone()));
    }
    let prompt = render_generation_prompt(spec.per_image, spec.option_count, template)?;
    let profile = generator.profile();
    let request = ChatRequest::user(prompt, profile.temperature, spec.max_tokens, spec.seed).with_image(image.uri.clone());
    let exchange = generator
        .complete_chat(request)
        .await
        .map_err(|source| CurationError::Backend { image_id: image.image_id.clone(), source })?;
    let parsed = parse_generated_questions(&exchange.response.text, &image.image_id, spec, &profile.model);
    if parsed.questions.is_empty() {
        return Err(CurationError::NothingParsed {
            image_id: image.image_id.clone(),
            rejected: parsed.rejections.len(),
            rejections: parsed.rejections,
        });
    }
    Ok(parsed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub image_id: String,
    pub vector: Vec<f64>,
    #[serde(default)]
    pub dim: usize,
}

impl EmbeddingRecord {
    pub fn new(image_id: impl Into<String>, vector: Vec<f64>) -> Self {
        let dim = vector.len();
        EmbeddingRecord { image_id: image_id.into(), vector, dim }
    }
}

/// Check all records share one dimension and have unit L2 norm (to 1e-6).
/// Returns the shared dimension, or `None` for an empty set.
pub fn validate_embeddings(records: &[EmbeddingRecord]) -> Result<Option<usize>, CurationError> {
    let Some(first) = records.first() else { return Ok(None) };
    let expected = first.vector.len();
    for r in records {
        if r.vector.len() != expected || (r.dim != 0 && r.dim != r.vector.len()) {
            return Err(CurationError::DimensionMismatch {
                image_id: r.image_id.clone(),
                expected,
                got: if r.vector.len() != expected { r.vector.len() } else { r.dim },
            });
        }
        let norm = r.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(CurationError::NotUnitNorm { image_id: r.image_id.clone(), norm });
        }
    }
    Ok(Some(expected))
}

fn check_pair(a: Option<usize>, b: Option<usize>, b_first: Option<&EmbeddingRecord>) -> Result<(), CurationError> {
    match (a, b, b_first) {
        (Some(x), Some(y), Some(r)) if x != y => {
            Err(CurationError::DimensionMismatch { image_id: r.image_id.clone(), expected: x, got: y })
        }
        _ => Ok(()),
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DuplicatePair {
    pub image_id: String,
    pub duplicate_of: String,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DedupOutcome {
    /// Kept ids in ascending order.
    pub kept: Vec<String>,
    pub duplicates: Vec<DuplicatePair>,
}

/// Which earlier records can absorb a later one during deduplication.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DedupMode {
    /// Dropped iff similar to any earlier record, kept or not (SemDeDup's
    /// rule). Raising the threshold can only grow the kept set.
    #[default]
    AnyEarlier,
    /// Dropped iff similar to an earlier *kept* record (greedy keep-first).
    /// Keeps more, but kept sets at different thresholds need not nest.
    KeptOnly,
}

/// [`dedup_with_mode`] with the default [`DedupMode::AnyEarlier`].
pub fn dedup_by_embedding(records: &[EmbeddingRecord], threshold: f64) -> Result<DedupOutcome, CurationError> {
    dedup_with_mode(records, threshold, DedupMode::default())
}

/// Deduplicate in ascending `image_id` order: a record is dropped iff its
/// cosine similarity to an eligible earlier record is at least `threshold`.
/// The log names the earliest such record.
pub fn dedup_with_mode(
    records: &[EmbeddingRecord],
    threshold: f64,
    mode: DedupMode,
) -> Result<DedupOutcome, CurationError> {
    validate_embeddings(records)?;
    let mut seen = HashSet::new();
    if let Some(r) = records.iter().find(|r| !seen.insert(r.image_id.as_str())) {
        return Err(CurationError::DuplicateId(r.image_id.clone()));
    }
    let mut order: Vec<&EmbeddingRecord> = records.iter().collect();
    order.sort_by(|a, b| a.image_id.cmp(&b.image_id));

    let mut kept = Vec::new();
    let mut eligible: Vec<&EmbeddingRecord> = Vec::new();
    let mut duplicates = Vec::new();
    for r in order {
        let hit = eligible
            .iter()
            .map(|k| (k, cosine(&r.vector, &k.vector)))
            .find(|(_, sim)| *sim >= threshold);
        match hit {
            Some((k, similarity)) => {
                duplicates.push(DuplicatePair { image_id: r.image_id.clone(), duplicate_of: k.image_id.clone(), similarity });
                if mode == DedupMode::AnyEarlier {
                    eligible.push(r);
                }
            }
            None => {
                kept.push(r.image_id.clone());
                eligible.push(r);
            }
        }
    }
    Ok(DedupOutcome { kept, duplicates })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapFlag {
    pub image_id: String,
    pub benchmark_id: String,
    pub similarity: f64,
}

/// Flag every record whose maximum cosine similarity to a benchmark vector is
/// at least `threshold`. Flags come back in ascending `image_id` order.
pub fn flag_benchmark_overlap(
    records: &[EmbeddingRecord],
    benchmark: &[EmbeddingRecord],
    threshold: f64,
) -> Result<Vec<OverlapFlag>, CurationError> {
    let a = validate_embeddings(records)?;
    let b = validate_embeddings(benchmark)?;
    check_pair(a, b, benchmark.first())?;

    let mut flags: Vec<OverlapFlag> = records
        .iter()
        .filter_map(|r| {
            benchmark
                .iter()
                .map(|b| (b, cosine(&r.vector, &b.vector)))
                .max_by(|x, y| x.1.total_cmp(&y.1))
                .filter(|(_, sim)| *sim >= threshold)
                .map(|(b, similarity)| OverlapFlag {
                    image_id: r.image_id.clone(),
                    benchmark_id: b.image_id.clone(),
                    similarity,
                })
        })
        .collect();
    flags.sort_by(|x, y| x.image_id.cmp(&y.image_id));
    Ok(flags)
}
