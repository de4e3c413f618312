//! Multiple-choice questions: validation, seeded option shuffling, answer
//! parsing and exact-match grading.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::SplitMix64;

pub const MIN_OPTIONS: usize = 2;
pub const MAX_OPTIONS: usize = 8;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum McqError {
    #[error("question `{id}` has {count} options, expected {MIN_OPTIONS}..={MAX_OPTIONS}")]
    OptionCount { id: String, count: usize },
    #[error("question `{id}` correct_index {index} is out of range for {count} options")]
    CorrectIndex { id: String, index: usize, count: usize },
    #[error("question `{id}` has options that collide after normalization: `{text}`")]
    DuplicateOption { id: String, text: String },
    #[error("question id is empty")]
    EmptyId,
    #[error("duplicate question id `{0}`")]
    DuplicateId(String),
}

/// A multiple-choice question with one correct option.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mcq {
    pub id: String,
    pub image_id: String,
    pub stem: String,
    pub options: Vec<String>,
    pub correct_index: usize,
    #[serde(default)]
    pub provenance: String,
}

impl Mcq {
    pub fn validate(&self) -> Result<(), McqError> {
        if self.id.is_empty() {
            return Err(McqError::EmptyId);
        }
        let count = self.options.len();
        if !(MIN_OPTIONS..=MAX_OPTIONS).contains(&count) {
            return Err(McqError::OptionCount { id: self.id.clone(), count });
        }
        if self.correct_index >= count {
            return Err(McqError::CorrectIndex {
                id: self.id.clone(),
                index: self.correct_index,
                count,
            });
        }
        let mut seen = HashSet::with_capacity(count);
        for option in &self.options {
            let norm = normalize(option);
            if !seen.insert(norm.clone()) {
                return Err(McqError::DuplicateOption { id: self.id.clone(), text: norm });
            }
        }
        Ok(())
    }

    pub fn correct_text(&self) -> &str {
        &self.options[self.correct_index]
    }
}

/// Validate every question and check ids are unique across the set.
pub fn validate_set<'a>(questions: impl IntoIterator<Item = &'a Mcq>) -> Result<(), McqError> {
    let mut ids = HashSet::new();
    for q in questions {
        q.validate()?;
        if !ids.insert(q.id.as_str()) {
            return Err(McqError::DuplicateId(q.id.clone()));
        }
    }
    Ok(())
}

/// Case-fold, trim and collapse internal whitespace.
pub fn normalize(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Option label for a 0-based position: `A`, `B`, ...
pub fn label_for(position: usize) -> char {
    debug_assert!(position < MAX_OPTIONS);
    (b'A' + position as u8) as char
}

fn position_of(label: char) -> Option<usize> {
    if label.is_ascii_uppercase() {
        Some((label as u8 - b'A') as usize)
    } else {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledOption {
    pub label: char,
    pub text: String,
}

/// One presentation of a question with its options permuted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShuffledMcq {
    pub mcq_id: String,
    pub stem: String,
    /// `permutation[position] = original option index`.
    pub permutation: Vec<usize>,
    pub labeled_options: Vec<LabeledOption>,
    pub correct_label: char,
    pub instance_seed: u64,
}

impl ShuffledMcq {
    pub fn has_label(&self, label: char) -> bool {
        position_of(label).is_some_and(|p| p < self.labeled_options.len())
    }

    pub fn text_at(&self, label: char) -> Option<&str> {
        let pos = position_of(label)?;
        self.labeled_options.get(pos).map(|o| o.text.as_str())
    }
}

/// Fisher-Yates permutation of `0..n` driven by [`SplitMix64`] seeded with
/// `seed`: for `i` from `n-1` down to `1`, `j = rng.below(i + 1)`, swap
/// `i` and `j`.
pub fn seeded_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = SplitMix64::new(seed);
    for i in (1..n).rev() {
        let j = rng.below(i as u64 + 1) as usize;
        perm.swap(i, j);
    }
    perm
}

/// Present `mcq` with options permuted by [`seeded_permutation`].
pub fn shuffle_mcq(mcq: &Mcq, instance_seed: u64) -> ShuffledMcq {
    let permutation = seeded_permutation(mcq.options.len(), instance_seed);
    let labeled_options = permutation
        .iter()
        .enumerate()
        .map(|(pos, &orig)| LabeledOption { label: label_for(pos), text: mcq.options[orig].clone() })
        .collect();
    let correct_pos = permutation
        .iter()
        .position(|&orig| orig == mcq.correct_index)
        .expect("permutation is a bijection");
    ShuffledMcq {
        mcq_id: mcq.id.clone(),
        stem: mcq.stem.clone(),
        permutation,
        labeled_options,
        correct_label: label_for(correct_pos),
        instance_seed,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseStatus {
    Clean,
    FallbackTextMatch,
    Unparseable,
}

/// Extract the chosen label from a free-form answer.
///
/// Rules, first match wins:
/// 1. `Clean`: the last standalone uppercase letter that is a label of this
///    instance. Standalone means neither neighbour is alphanumeric, so
///    `Answer: B`, `(B)` and `B.` all qualify.
/// 2. `FallbackTextMatch`: exactly one option's normalized text occurs in
///    the normalized response.
/// 3. `Unparseable`.
pub fn parse_answer(raw: &str, smcq: &ShuffledMcq) -> (Option<char>, ParseStatus) {
    let chars: Vec<char> = raw.chars().collect();
    let standalone = |i: usize| {
        let before = i.checked_sub(1).map(|p| chars[p]);
        let after = chars.get(i + 1).copied();
        !before.is_some_and(char::is_alphanumeric) && !after.is_some_and(char::is_alphanumeric)
    };
    let last_label = (0..chars.len())
        .rev()
        .find(|&i| chars[i].is_ascii_uppercase() && smcq.has_label(chars[i]) && standalone(i));
    if let Some(i) = last_label {
        return (Some(chars[i]), ParseStatus::Clean);
    }

    let haystack = normalize(raw);
    let mut hits = smcq
        .labeled_options
        .iter()
        .filter(|o| {
            let needle = normalize(&o.text);
            !needle.is_empty() && haystack.contains(&needle)
        });
    match (hits.next(), hits.next()) {
        (Some(only), None) => (Some(only.label), ParseStatus::FallbackTextMatch),
        _ => (None, ParseStatus::Unparseable),
    }
}

/// Exact-match reward: 1 iff the parsed label is the correct one.
pub fn grade(parsed: Option<char>, smcq: &ShuffledMcq) -> u8 {
    u8::from(parsed == Some(smcq.correct_label))
}

/// Outcome of presenting one shuffled question to a model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub mcq_id: String,
    pub instance_seed: u64,
    pub raw_response: String,
    pub parsed_label: Option<char>,
    pub correct: bool,
    pub parse_status: ParseStatus,
}

impl AnswerRecord {
    /// Parse and grade `raw` against `smcq`.
    pub fn evaluate(raw: impl Into<String>, smcq: &ShuffledMcq) -> Self {
        let raw_response = raw.into();
        let (parsed_label, parse_status) = parse_answer(&raw_response, smcq);
        AnswerRecord {
            mcq_id: smcq.mcq_id.clone(),
            instance_seed: smcq.instance_seed,
            raw_response,
            parsed_label,
            correct: grade(parsed_label, smcq) == 1,
            parse_status,
        }
    }
}
