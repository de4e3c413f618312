use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use thiserror::Error;

use super::ChatExchange;

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("cache I/O error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("corrupt cache entry {path}: {source}")]
    Corrupt { path: PathBuf, source: serde_json::Error },
    #[error("malformed cache key `{0}`")]
    BadKey(String),
}

/// Content-addressed store of chat exchanges. Values are a pure function of
/// their key, so concurrent writers of the same key are interchangeable.
pub trait ResponseCache: Send + Sync {
    fn get(&self, key: &str) -> Result<Option<ChatExchange>, CacheError>;
    fn put(&self, exchange: &ChatExchange) -> Result<(), CacheError>;
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Default)]
pub struct MemoryCache {
    entries: Mutex<HashMap<String, ChatExchange>>,
}

impl MemoryCache {
    pub fn new() -> Self {
        Self::default()
    }
}

impl ResponseCache for MemoryCache {
    fn get(&self, key: &str) -> Result<Option<ChatExchange>, CacheError> {
        Ok(self.entries.lock().expect("cache lock").get(key).cloned())
    }

    fn put(&self, exchange: &ChatExchange) -> Result<(), CacheError> {
        self.entries
            .lock()
            .expect("cache lock")
            .insert(exchange.cache_key.clone(), exchange.clone());
        Ok(())
    }

    fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }
}

/// One JSON file per exchange under a two-level hex fan-out:
/// `<root>/ab/cdef….json` for key `abcdef…`.
#[derive(Debug)]
pub struct DirCache {
    root: PathBuf,
    tmp_counter: AtomicU64,
}

impl DirCache {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, CacheError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|source| CacheError::Io { path: root.clone(), source })?;
        Ok(DirCache { root, tmp_counter: AtomicU64::new(0) })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_for(&self, key: &str) -> Result<PathBuf, CacheError> {
        if key.len() < 3 || !key.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(CacheError::BadKey(key.to_string()));
        }
        Ok(self.root.join(&key[..2]).join(format!("{}.json", &key[2..])))
    }
}

impl ResponseCache for DirCache {
    fn get(&self, key: &str) -> Result<Option<ChatExchange>, CacheError> {
        let path = self.path_for(key)?;
        match fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map(Some)
                .map_err(|source| CacheError::Corrupt { path, source }),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(source) => Err(CacheError::Io { path, source }),
        }
    }

    fn put(&self, exchange: &ChatExchange) -> Result<(), CacheError> {
        let path = self.path_for(&exchange.cache_key)?;
        let dir = path.parent().expect("fan-out dir");
        let io = |source, path: &Path| CacheError::Io { path: path.to_path_buf(), source };
        fs::create_dir_all(dir).map_err(|e| io(e, dir))?;
        let bytes = serde_json::to_vec_pretty(exchange).expect("exchange serializes");
        // Write-then-rename keeps readers from ever seeing a partial file.
        let tmp = dir.join(format!(
            ".{}.{}.{}.tmp",
            &exchange.cache_key[2..],
            std::process::id(),
            self.tmp_counter.fetch_add(1, Ordering::Relaxed)
        ));
        let mut file = fs::File::create(&tmp).map_err(|e| io(e, &tmp))?;
        file.write_all(&bytes).map_err(|e| io(e, &tmp))?;
        drop(file);
        fs::rename(&tmp, &path).map_err(|e| io(e, &path))
    }

    fn len(&self) -> usize {
        let Ok(dirs) = fs::read_dir(&self.root) else { return 0 };
        dirs.filter_map(Result::ok)
            .filter_map(|d| fs::read_dir(d.path()).ok())
            .flat_map(|entries| entries.filter_map(Result::ok))
            .filter(|e| e.path().extension().is_some_and(|x| x == "json"))
            .count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{ChatRequest, ChatResponse, Usage};

    fn exchange(key: &str) -> ChatExchange {
        ChatExchange {
            cache_key: key.to_string(),
            profile: "p".into(),
            model: "m".into(),
            request: ChatRequest::user("q \u{e9}\n  spaced", 0.7, 16, 42).with_image("file:///x.png"),
            response: ChatResponse {
                text: "Answer: B".into(),
                finish_reason: "stop".into(),
                usage: Usage { prompt_tokens: 3, completion_tokens: 2 },
            },
            attempt_count: 2,
            latency_ms: 17,
        }
    }

    #[test]
    fn dir_cache_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cache = DirCache::open(dir.path()).unwrap();
        let key = "ab".to_string() + &"c".repeat(62);
        let ex = exchange(&key);
        assert!(cache.get(&key).unwrap().is_none());
        cache.put(&ex).unwrap();
        let path = cache.path_for(&key).unwrap();
        assert!(path.starts_with(dir.path().join("ab")));
        let back = cache.get(&key).unwrap().unwrap();
        assert_eq!(back, ex);
        assert_eq!(serde_json::to_vec(&back).unwrap(), serde_json::to_vec(&ex).unwrap());
        assert_eq!(cache.len(), 1);

        let reopened = DirCache::open(dir.path()).unwrap();
        assert_eq!(reopened.get(&key).unwrap().unwrap(), ex);
    }

    #[test]
    fn bad_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cache = DirCache::open(dir.path()).unwrap();
        assert!(matches!(cache.get("../etc"), Err(CacheError::BadKey(_))));
    }

    #[test]
    fn memory_cache_basics() {
        let cache = MemoryCache::new();
        assert!(cache.is_empty());
        cache.put(&exchange("abc")).unwrap();
        assert_eq!(cache.get("abc").unwrap().unwrap().attempt_count, 2);
        assert_eq!(cache.len(), 1);
    }
}
