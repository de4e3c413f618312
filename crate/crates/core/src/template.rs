//! Prompt templates and rendering.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mcq::{LabeledOption, ShuffledMcq};

pub const CAPTION: &str = "{caption}";
pub const STEM: &str = "{stem}";
pub const OPTIONS: &str = "{options}";
pub const COUNT: &str = "{count}";
pub const OPTION_COUNT: &str = "{option_count}";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TemplateError {
    #[error("template `{name}` must contain `{placeholder}` exactly once (found {found})")]
    Placeholder { name: String, placeholder: &'static str, found: usize },
    #[error("unknown template `{0}`")]
    Unknown(String),
    #[error("template `{name}` is a {actual:?} template, expected {expected:?}")]
    WrongKind { name: String, expected: TemplateKind, actual: TemplateKind },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    /// Text-only answering from a caption.
    CaptionAnswer,
    /// Answering with or without the image attached; no caption slot.
    VisualProbe,
    /// Asks a vision model to write questions about an image.
    QaGeneration,
    /// Asks a vision model to describe an image.
    Caption,
}

impl TemplateKind {
    fn placeholders(self) -> &'static [&'static str] {
        match self {
            TemplateKind::CaptionAnswer => &[CAPTION, STEM, OPTIONS],
            TemplateKind::VisualProbe => &[STEM, OPTIONS],
            TemplateKind::QaGeneration => &[COUNT, OPTION_COUNT],
            TemplateKind::Caption => &[],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub name: String,
    pub kind: TemplateKind,
    pub body: String,
}

pub const DEFAULT_ANSWER_TEMPLATE: &str = "caption-answer-v1";
pub const DEFAULT_PROBE_TEMPLATE: &str = "visual-probe-v1";
pub const DEFAULT_GENERATION_TEMPLATE: &str = "qa-generation-v1";
pub const DEFAULT_CAPTION_TEMPLATE: &str = "caption-v1";

const ANSWER_BODY: &str = "You are given a detailed description of an image. \
You cannot see the image itself, so rely only on the description.\n\
\n\
Description:\n\
{caption}\n\
\n\
Question: {stem}\n\
Options:\n\
{options}\n\
\n\
Answer with the letter of the correct option, in the form \"Answer: <letter>\".";

const PROBE_BODY: &str = "Question: {stem}\n\
Options:\n\
{options}\n\
\n\
Answer with the letter of the correct option, in the form \"Answer: <letter>\".";

const GENERATION_BODY: &str = "Look at the image carefully and write {count} multiple-choice \
questions whose answers can only be determined by looking at the image. \
Each question must have exactly {option_count} options and exactly one correct option.\n\
Use this layout for every question, separated by a blank line:\n\
\n\
1. <question>\n\
A. <option>\n\
B. <option>\n\
...\n\
Answer: <letter>";

const CAPTION_BODY: &str = "Please describe the image in detail. Cover every object, \
its attributes, any visible text, the spatial layout, and the overall scene.";

impl PromptTemplate {
    pub fn new(
        name: impl Into<String>,
        kind: TemplateKind,
        body: impl Into<String>,
    ) -> Result<Self, TemplateError> {
        let t = PromptTemplate { name: name.into(), kind, body: body.into() };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), TemplateError> {
        for &placeholder in self.kind.placeholders() {
            let found = self.body.matches(placeholder).count();
            if found != 1 {
                return Err(TemplateError::Placeholder {
                    name: self.name.clone(),
                    placeholder,
                    found,
                });
            }
        }
        Ok(())
    }

    pub fn expect_kind(&self, kind: TemplateKind) -> Result<(), TemplateError> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(TemplateError::WrongKind { name: self.name.clone(), expected: kind, actual: self.kind })
        }
    }

    pub fn builtin(name: &str) -> Result<Self, TemplateError> {
        let (kind, body) = match name {
            DEFAULT_ANSWER_TEMPLATE => (TemplateKind::CaptionAnswer, ANSWER_BODY),
            DEFAULT_PROBE_TEMPLATE => (TemplateKind::VisualProbe, PROBE_BODY),
            DEFAULT_GENERATION_TEMPLATE => (TemplateKind::QaGeneration, GENERATION_BODY),
            DEFAULT_CAPTION_TEMPLATE => (TemplateKind::Caption, CAPTION_BODY),
            other => return Err(TemplateError::Unknown(other.to_string())),
        };
        Ok(PromptTemplate { name: name.to_string(), kind, body: body.to_string() })
    }

    pub fn default_answer() -> Self {
        Self::builtin(DEFAULT_ANSWER_TEMPLATE).expect("builtin")
    }

    pub fn default_probe() -> Self {
        Self::builtin(DEFAULT_PROBE_TEMPLATE).expect("builtin")
    }

    /// Recover the caption, stem and labeled options from a prompt rendered
    /// with this (caption-answer) template. Used by the keyword mock.
    pub fn extract(&self, prompt: &str) -> Option<ExtractedPrompt> {
        let mut slots: Vec<(usize, &'static str)> = [CAPTION, STEM, OPTIONS]
            .iter()
            .filter_map(|p| self.body.find(p).map(|at| (at, *p)))
            .collect();
        if slots.len() != 3 {
            return None;
        }
        slots.sort();

        let mut literals = Vec::with_capacity(4);
        let mut cursor = 0;
        for &(at, p) in &slots {
            literals.push(&self.body[cursor..at]);
            cursor = at + p.len();
        }
        literals.push(&self.body[cursor..]);

        let mut rest = prompt.strip_prefix(literals[0])?;
        let mut values = Vec::with_capacity(3);
        for (i, _) in slots.iter().enumerate() {
            let next = literals[i + 1];
            let end = if i + 1 == slots.len() {
                rest.len().checked_sub(next.len()).filter(|&e| rest[e..] == *next)?
            } else if next.is_empty() {
                return None;
            } else {
                rest.find(next)?
            };
            values.push(&rest[..end]);
            rest = &rest[end + next.len()..];
        }

        let mut out = ExtractedPrompt::default();
        for ((_, p), value) in slots.iter().zip(values) {
            match *p {
                CAPTION => out.caption = value.to_string(),
                STEM => out.stem = value.to_string(),
                _ => out.options = parse_option_lines(value),
            }
        }
        Some(out)
    }
}

/// Caption, stem and options recovered from a rendered answer prompt.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExtractedPrompt {
    pub caption: String,
    pub stem: String,
    pub options: Vec<LabeledOption>,
}

fn parse_option_lines(block: &str) -> Vec<LabeledOption> {
    block
        .lines()
        .filter_map(|line| {
            let mut chars = line.chars();
            let label = chars.next().filter(char::is_ascii_uppercase)?;
            let text = chars.as_str().strip_prefix(". ")?;
            Some(LabeledOption { label, text: text.to_string() })
        })
        .collect()
}

/// Options as one `"<LABEL>. <text>"` line each.
pub fn render_options(options: &[LabeledOption]) -> String {
    options
        .iter()
        .map(|o| format!("{}. {}", o.label, o.text))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Single-pass substitution so placeholder-like text inside values is left alone.
fn substitute(body: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(body.len() + values.iter().map(|(_, v)| v.len()).sum::<usize>());
    let mut rest = body;
    'outer: while !rest.is_empty() {
        for (key, value) in values {
            if let Some(tail) = rest.strip_prefix(key) {
                out.push_str(value);
                rest = tail;
                continue 'outer;
            }
        }
        let mut chars = rest.chars();
        out.push(chars.next().expect("non-empty"));
        rest = chars.as_str();
    }
    out
}

/// Prompt for the text-only answerer.
pub fn render_answer_prompt(
    caption: &str,
    smcq: &ShuffledMcq,
    template: &PromptTemplate,
) -> Result<String, TemplateError> {
    template.expect_kind(TemplateKind::CaptionAnswer)?;
    template.validate()?;
    let options = render_options(&smcq.labeled_options);
    Ok(substitute(
        &template.body,
        &[(CAPTION, caption), (STEM, &smcq.stem), (OPTIONS, &options)],
    ))
}

/// Prompt for the image-conditioned and blind probes (identical text).
pub fn render_probe_prompt(smcq: &ShuffledMcq, template: &PromptTemplate) -> Result<String, TemplateError> {
    template.expect_kind(TemplateKind::VisualProbe)?;
    template.validate()?;
    let options = render_options(&smcq.labeled_options);
    Ok(substitute(&template.body, &[(STEM, &smcq.stem), (OPTIONS, &options)]))
}

pub fn render_generation_prompt(
    count: usize,
    option_count: usize,
    template: &PromptTemplate,
) -> Result<String, TemplateError> {
    template.expect_kind(TemplateKind::QaGeneration)?;
    template.validate()?;
    Ok(substitute(
        &template.body,
        &[(COUNT, &count.to_string()), (OPTION_COUNT, &option_count.to_string())],
    ))
}
