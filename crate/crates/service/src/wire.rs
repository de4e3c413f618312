//! JSON bodies of the HTTP API.

use capreward_core::reward::RewardReport;
use capreward_core::{FilterVerdict, Mcq, SamplingMode};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionWire {
    pub caption_id: String,
    pub text: String,
    pub rollout_index: usize,
}

/// Where a reward request's questions come from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum QuestionSetRef {
    /// A set registered at startup, by image id.
    Registered(String),
    Inline(Vec<Mcq>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardRequestWire {
    pub group_id: String,
    pub image_id: String,
    pub captions: Vec<CaptionWire>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_rounds: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Defaults to the set registered under `image_id`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question_set: Option<QuestionSetRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub n_rounds: usize,
    pub seed: u64,
    pub sampling_mode: SamplingMode,
    pub epsilon: f64,
    pub template_name: String,
    pub answerer: String,
}

/// Wall time is sent in the `x-timing-ms` header so that bodies stay a pure
/// function of the request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardResponseWire {
    pub group_id: String,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    pub reports: Vec<RewardReport>,
    pub engine_version: String,
    pub config_echo: ConfigEcho,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterRequestWire {
    pub mcq: Mcq,
    pub image_id: String,
    /// Overrides the image manifest lookup.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_uri: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_rounds: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_img: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_blind: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterResponseWire {
    #[serde(flatten)]
    pub verdict: FilterVerdict,
    pub tau_img: f64,
    pub tau_blind: f64,
    pub threshold_source: String,
    pub engine_version: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorDetail {
    /// Stable machine-readable code.
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub round_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mcq_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: ErrorDetail,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendHealth {
    pub name: String,
    pub model: String,
    pub vision_capable: bool,
    pub reachable: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub entries: usize,
    pub hits: u64,
    pub misses: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HealthBody {
    /// `ok`, or `degraded` when a backend is unreachable.
    pub status: String,
    pub engine_version: String,
    pub backends: Vec<BackendHealth>,
    pub cache_stats: CacheStats,
}
