use std::path::{Path, PathBuf};

use super::CompletionRecord;
use crate::error::{Error, Result};
use crate::util;

/// Content-addressed completion records under `dir/<key[..2]>/<key>.json`.
///
/// A record whose stored key, or whose recomputed request key, differs from
/// its file name is reported as corrupt.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn new(dir: PathBuf) -> Self {
        Self { dir }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, key: &str) -> PathBuf {
        let shard = key.get(..2).unwrap_or("xx");
        self.dir.join(shard).join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str) -> Result<Option<CompletionRecord>> {
        let path = self.path_for(key);
        if !path.exists() {
            return Ok(None);
        }
        let text = util::read_to_string(&path)?;
        let record: CompletionRecord =
            serde_json::from_str(&text).map_err(|e| Error::CacheCorrupt {
                path: path.clone(),
                reason: e.to_string(),
            })?;
        if record.cache_key != key {
            return Err(Error::CacheCorrupt {
                path,
                reason: format!("stored key {} does not match", record.cache_key),
            });
        }
        let recomputed = record.request.cache_key();
        if recomputed != key {
            return Err(Error::CacheCorrupt {
                path,
                reason: format!("request parameters hash to {recomputed}"),
            });
        }
        Ok(Some(record))
    }

    pub fn put(&self, record: &CompletionRecord) -> Result<()> {
        let path = self.path_for(&record.cache_key);
        let mut text = serde_json::to_string_pretty(record)?;
        text.push('\n');
        util::write_atomic(&path, text.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{BackendKind, CompletionRequest};

    fn record() -> CompletionRecord {
        let request = CompletionRequest {
            backend: BackendKind::Mock,
            engine_name: "mock".into(),
            prompt: "Example 1: hi\nExample 2:".into(),
            temperature: 0.7,
            max_length: 32,
            samples_per_call: 2,
            stop_sequence: "\nExample".into(),
            round: 0,
            backend_fingerprint: None,
        };
        CompletionRecord {
            cache_key: request.cache_key(),
            prompt_digest: "d".into(),
            engine_name: "mock".into(),
            temperature: 0.7,
            request,
            completions: vec![" hello".into(), " hey".into()],
            timestamp: 1,
            call_cost_meta: None,
        }
    }

    #[test]
    fn round_trip_and_corruption_detection() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::new(dir.path().to_path_buf());
        let rec = record();
        assert!(cache.get(&rec.cache_key).unwrap().is_none());
        cache.put(&rec).unwrap();
        assert_eq!(cache.get(&rec.cache_key).unwrap(), Some(rec.clone()));

        let path = cache.path_for(&rec.cache_key);
        let tampered = std::fs::read_to_string(&path)
            .unwrap()
            .replace("\"temperature\": 0.7", "\"temperature\": 0.9");
        std::fs::write(&path, tampered).unwrap();
        assert!(matches!(
            cache.get(&rec.cache_key),
            Err(Error::CacheCorrupt { .. })
        ));

        std::fs::write(&path, "{ not json").unwrap();
        assert!(matches!(
            cache.get(&rec.cache_key),
            Err(Error::CacheCorrupt { .. })
        ));
    }
}
