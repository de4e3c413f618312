//! Caption-utility rewards for reinforcement learning.
//!
//! A caption is scored by how many shuffled multiple-choice questions about
//! its image a text-only answerer gets right from the caption alone. Around
//! that reward sit group-relative advantages, QA generation and leakage
//! filtering, embedding deduplication, and a two-stage captioner evaluation.

pub mod backend;
pub mod curation;
pub mod filtering;
pub mod grpo;
pub mod jsonl;
pub mod mcq;
pub mod prism;
pub mod reward;
pub mod seed;
pub mod template;

pub use backend::{BackendClient, BackendError, BackendProfile, BackendRegistry, ChatExchange, ChatRequest};
pub use curation::{EmbeddingRecord, GenSpec, ImageRef};
pub use filtering::{Decision, FilterConfig, FilterVerdict};
pub use grpo::{compute_group_advantages, GroupAdvantage};
pub use mcq::{grade, parse_answer, shuffle_mcq, AnswerRecord, Mcq, ParseStatus, ShuffledMcq};
pub use reward::{score_caption, score_group, CaptionSample, RewardConfig, RewardReport, SamplingMode};
pub use template::{render_answer_prompt, PromptTemplate, TemplateKind};

/// Version string embedded in service responses and run manifests.
pub const ENGINE_VERSION: &str = concat!("capreward/", env!("CARGO_PKG_VERSION"));
