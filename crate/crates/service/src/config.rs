use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use capreward_core::backend::BackendProfile;
use capreward_core::grpo::SERVING_EPSILON;
use capreward_core::jsonl::read_jsonl;
use capreward_core::{FilterConfig, ImageRef, Mcq, RewardConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Name of the keyword answerer that is always available.
pub const BUILTIN_MOCK: &str = "mock-keyword";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    #[serde(default = "default_bind")]
    pub bind: String,
    #[serde(default)]
    pub backends: Vec<BackendProfile>,
    /// Backend that answers reward questions from captions.
    #[serde(default = "default_answerer")]
    pub answerer: String,
    /// Vision backend used by `/v1/filter`.
    #[serde(default)]
    pub prober: Option<String>,
    #[serde(default)]
    pub reward: RewardConfig,
    #[serde(default)]
    pub filter: FilterConfig,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// JSON-lines MCQ files, registered by `image_id`.
    #[serde(default)]
    pub question_sets: Vec<PathBuf>,
    /// JSON-lines image manifests used to resolve filter requests.
    #[serde(default)]
    pub image_manifests: Vec<PathBuf>,
    /// Response cache directory; in-memory when absent.
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    /// Environment variable holding a bearer token required on `/v1/*`.
    #[serde(default)]
    pub bearer_token_env: Option<String>,
    /// Simultaneous reward/filter computations before answering 429.
    #[serde(default = "default_admission")]
    pub admission_limit: usize,
    #[serde(default = "default_drain_ms")]
    pub drain_deadline_ms: u64,
}

fn default_bind() -> String {
    "127.0.0.1:8080".into()
}
fn default_answerer() -> String {
    BUILTIN_MOCK.into()
}
fn default_epsilon() -> f64 {
    SERVING_EPSILON
}
fn default_admission() -> usize {
    64
}
fn default_drain_ms() -> u64 {
    10_000
}

impl Default for ServiceConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{0}")]
    Parse(ParseDiagnostic),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Where a JSON document failed to deserialize.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseDiagnostic {
    pub source: String,
    pub line: usize,
    pub column: usize,
    /// Dotted path to the offending field, `.` for the root.
    pub field: String,
    pub message: String,
}

impl fmt::Display for ParseDiagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}: field `{}`: {}", self.source, self.line, self.column, self.field, self.message)
    }
}

/// Deserialize with a field path and line/column on failure.
pub fn parse_json<T: DeserializeOwned>(text: &str, source: &str) -> Result<T, ParseDiagnostic> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        let inner = e.into_inner();
        ParseDiagnostic {
            source: source.to_string(),
            line: inner.line(),
            column: inner.column(),
            field,
            message: strip_position(&inner.to_string()),
        }
    })
}

fn strip_position(message: &str) -> String {
    match message.rfind(" at line ") {
        Some(i) => message[..i].to_string(),
        None => message.to_string(),
    }
}

impl ServiceConfig {
    /// Read a config file. Relative data paths are resolved against the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        let mut config: ServiceConfig =
            parse_json(&text, &path.display().to_string()).map_err(ConfigError::Parse)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        config.question_sets.iter_mut().for_each(resolve);
        config.image_manifests.iter_mut().for_each(resolve);
        if let Some(dir) = config.cache_dir.as_mut() {
            resolve(dir);
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        self.reward.validate().map_err(|e| ConfigError::Invalid(format!("reward: {e}")))?;
        self.filter.validate().map_err(|e| ConfigError::Invalid(format!("filter: {e}")))?;
        for b in &self.backends {
            b.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return invalid("epsilon must be >= 0".into());
        }
        if self.admission_limit == 0 {
            return invalid("admission_limit must be >= 1".into());
        }
        let known = |name: &str| name == BUILTIN_MOCK || self.backends.iter().any(|b| b.name == name);
        if !known(&self.answerer) {
            return invalid(format!("answerer `{}` is not a configured backend", self.answerer));
        }
        if let Some(p) = &self.prober {
            if !known(p) {
                return invalid(format!("prober `{p}` is not a configured backend"));
            }
        }
        Ok(())
    }

    /// Configured profiles plus the built-in keyword answerer unless a
    /// backend of that name is configured.
    pub fn profiles(&self) -> Vec<BackendProfile> {
        let mut out = self.backends.clone();
        if !out.iter().any(|b| b.name == BUILTIN_MOCK) {
            out.push(BackendProfile::mock_keyword(BUILTIN_MOCK));
        }
        out
    }
}

/// Group MCQ files by `image_id`. Question ids must be unique across files.
pub fn load_question_sets(paths: &[PathBuf]) -> Result<BTreeMap<String, Vec<Mcq>>, ConfigError> {
    let mut sets: BTreeMap<String, Vec<Mcq>> = BTreeMap::new();
    let mut ids = std::collections::HashSet::new();
    for path in paths {
        let questions: Vec<Mcq> = read_jsonl(path).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        for q in questions {
            q.validate()
                .map_err(|e| ConfigError::Invalid(format!("{}: question `{}`: {e}", path.display(), q.id)))?;
            if !ids.insert(q.id.clone()) {
                return Err(ConfigError::Invalid(format!("{}: duplicate question id `{}`", path.display(), q.id)));
            }
            sets.entry(q.image_id.clone()).or_default().push(q);
        }
    }
    Ok(sets)
}

pub fn load_images(paths: &[PathBuf]) -> Result<BTreeMap<String, ImageRef>, ConfigError> {
    let mut images = BTreeMap::new();
    for path in paths {
        let refs: Vec<ImageRef> = read_jsonl(path).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        for r in refs {
            r.validate().map_err(|e| ConfigError::Invalid(format!("{}: {e}", path.display())))?;
            images.insert(r.image_id.clone(), r);
        }
    }
    Ok(images)
}
