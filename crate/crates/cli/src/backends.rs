use std::path::Path;
use std::sync::Arc;

use capreward_core::backend::{BackendRegistry, DirCache, MemoryCache, ResponseCache};
use capreward_core::jsonl::read_jsonl;
use capreward_core::{BackendClient, BackendProfile};
use capreward_service::config::parse_json;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::{usage, CliError, CommonArgs};

pub const MOCK_KEYWORD: &str = "mock-keyword";
pub const MOCK_KEYWORD_ABSTAIN: &str = "mock-keyword-abstain";

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendsFile {
    #[serde(default)]
    pub backends: Vec<BackendProfile>,
}

pub fn builtin_profiles() -> Vec<BackendProfile> {
    vec![
        BackendProfile::mock_keyword(MOCK_KEYWORD),
        BackendProfile {
            endpoint: "mock:keyword?fallback=abstain".into(),
            ..BackendProfile::mock_keyword(MOCK_KEYWORD_ABSTAIN)
        },
    ]
}

/// Built-in mocks plus configured profiles (which win on name clashes),
/// sharing one cache.
pub fn open(args: &CommonArgs) -> Result<BackendRegistry, CliError> {
    let mut profiles = builtin_profiles();
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        let file: BackendsFile = parse_json(&text, &path.display().to_string()).map_err(usage)?;
        for p in file.backends {
            profiles.retain(|b| b.name != p.name);
            profiles.push(p);
        }
    }
    let cache: Arc<dyn ResponseCache> = match &args.cache_dir {
        Some(dir) => Arc::new(DirCache::open(dir).map_err(usage)?),
        None => Arc::new(MemoryCache::new()),
    };
    BackendRegistry::from_profiles(profiles, cache).map_err(usage)
}

pub fn backend<'a>(registry: &'a BackendRegistry, name: &str) -> Result<&'a BackendClient, CliError> {
    registry.get(name).map_err(usage)
}

pub fn vision_backend<'a>(registry: &'a BackendRegistry, name: &str) -> Result<&'a BackendClient, CliError> {
    let client = backend(registry, name)?;
    if !client.profile().vision_capable {
        return Err(usage(format!("backend `{name}` is not vision-capable")));
    }
    Ok(client)
}

/// Read a JSON-lines input; an unreadable or malformed file is a usage error.
pub fn read_input<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    read_jsonl(path).map_err(usage)
}
