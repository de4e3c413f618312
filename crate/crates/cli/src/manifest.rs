use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use capreward_core::backend::{BackendRegistry, StatsSnapshot};
use capreward_core::ENGINE_VERSION;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::{data, CliError, Tally};

/// Schema that every manifest validates against.
pub const SCHEMA: &str = include_str!("../../../schemas/run_manifest.schema.json");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    /// What the file is to the command, e.g. `qa` or `kept`.
    pub role: String,
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub command_line: Vec<String>,
    pub engine_version: String,
    /// Parameters after defaults and config files were applied.
    pub config: Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub wall_time_ms: u64,
    pub backend_stats: BTreeMap<String, StatsSnapshot>,
    pub records_total: usize,
    pub records_failed: usize,
    pub exit_code: i32,
}

pub fn digest_file(role: &str, path: &Path) -> Result<FileDigest, CliError> {
    let bytes = std::fs::read(path).map_err(|e| data(format!("{}: {e}", path.display())))?;
    Ok(FileDigest {
        role: role.to_string(),
        path: path.display().to_string(),
        sha256: hex::encode(Sha256::digest(&bytes)),
        bytes: bytes.len() as u64,
    })
}

/// Accumulates a manifest while a command runs.
pub struct Recorder {
    command: String,
    argv: Vec<String>,
    started: Instant,
    config: Value,
    seeds: BTreeMap<String, u64>,
    inputs: Vec<(String, PathBuf)>,
    outputs: Vec<(String, PathBuf)>,
}

impl Recorder {
    pub fn new(command: &str, argv: &[String]) -> Self {
        Recorder {
            command: command.to_string(),
            argv: argv.to_vec(),
            started: Instant::now(),
            config: Value::Null,
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn config(&mut self, config: impl Serialize) {
        self.config = serde_json::to_value(config).expect("config serializes");
    }

    pub fn seed(&mut self, name: &str, seed: u64) {
        self.seeds.insert(name.to_string(), seed);
    }

    pub fn input(&mut self, role: &str, path: &Path) {
        self.inputs.push((role.to_string(), path.to_path_buf()));
    }

    pub fn output(&mut self, role: &str, path: &Path) {
        self.outputs.push((role.to_string(), path.to_path_buf()));
    }

    /// Digest files, write the manifest to `path` and return the exit code.
    pub fn finish(
        self,
        path: &Path,
        registry: Option<&BackendRegistry>,
        tally: Tally,
        max_fail_rate: f64,
    ) -> Result<i32, CliError> {
        let digests = |files: &[(String, PathBuf)]| {
            files.iter().map(|(role, p)| digest_file(role, p)).collect::<Result<Vec<_>, _>>()
        };
        let exit_code = tally.exit_code(max_fail_rate);
        let manifest = RunManifest {
            command: self.command,
            command_line: self.argv,
            engine_version: ENGINE_VERSION.to_string(),
            config: self.config,
            seeds: self.seeds,
            inputs: digests(&self.inputs)?,
            outputs: digests(&self.outputs)?,
            wall_time_ms: self.started.elapsed().as_millis() as u64,
            backend_stats: registry
                .map(|r| r.iter().map(|c| (c.profile().name.clone(), c.stats())).collect())
                .unwrap_or_default(),
            records_total: tally.total,
            records_failed: tally.failed,
            exit_code,
        };
        write_json(path, &manifest)?;
        Ok(exit_code)
    }
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| data(format!("{}: {e}", parent.display())))?;
    }
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    std::fs::write(path, text).map_err(|e| data(format!("{}: {e}", path.display())))
}

/// `<file>.<suffix>` alongside `file`.
pub fn sibling(file: &Path, suffix: &str) -> PathBuf {
    let mut name = file.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".{suffix}"));
    file.with_file_name(name)
}
