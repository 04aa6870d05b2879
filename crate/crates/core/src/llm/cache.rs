//! Content-addressed response cache: one JSON document per entry under a
//! cache directory, keyed by a digest of the full request.

use super::{GenerationRequest, GenerationResponse};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

#[derive(Debug, Serialize, Deserialize)]
struct CacheEntry {
    key: String,
    request_digest: String,
    response_text: String,
    usage: Usage,
    provider_id: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Usage {
    prompt_tokens: u64,
    completion_tokens: u64,
}

#[derive(Debug)]
pub struct ResponseCache {
    dir: PathBuf,
    write_lock: Mutex<()>,
}

impl ResponseCache {
    pub fn new(dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(ResponseCache { dir, write_lock: Mutex::new(()) })
    }

    /// Digest over everything that determines a response: provider, message
    /// contents, sampling parameters, and the seed label.
    pub fn key(&self, request: &GenerationRequest, provider_id: &str) -> String {
        let mut hasher = Sha256::new();
        hasher.update(provider_id.as_bytes());
        hasher.update([0]);
        for m in &request.messages {
            hasher.update(serde_json::to_string(&m.role).expect("role serializes"));
            hasher.update([0]);
            hasher.update(m.content.as_bytes());
            hasher.update([0]);
        }
        hasher.update(request.temperature.to_le_bytes());
        hasher.update(request.top_p.to_le_bytes());
        hasher.update(request.max_tokens.to_le_bytes());
        if let Some(stop) = &request.stop {
            for s in stop {
                hasher.update(s.as_bytes());
                hasher.update([0]);
            }
        }
        hasher.update(request.seed_label.as_bytes());
        format!("{:x}", hasher.finalize())
    }

    fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub fn load(&self, key: &str) -> Option<GenerationResponse> {
        let text = std::fs::read_to_string(self.path_for(key)).ok()?;
        let entry: CacheEntry = match serde_json::from_str(&text) {
            Ok(e) => e,
            Err(e) => {
                log::warn!("discarding corrupt cache entry {key}: {e}");
                return None;
            }
        };
        if entry.key != key {
            log::warn!("cache entry key mismatch for {key}");
            return None;
        }
        Some(GenerationResponse {
            text: entry.response_text,
            prompt_tokens: entry.usage.prompt_tokens,
            completion_tokens: entry.usage.completion_tokens,
            provider_id: entry.provider_id,
        })
    }

    /// Best effort: I/O failures are logged and the call proceeds uncached.
    pub fn store(&self, key: &str, _request: &GenerationRequest, response: &GenerationResponse) {
        let entry = CacheEntry {
            key: key.to_string(),
            request_digest: key.to_string(),
            response_text: response.text.clone(),
            usage: Usage {
                prompt_tokens: response.prompt_tokens,
                completion_tokens: response.completion_tokens,
            },
            provider_id: response.provider_id.clone(),
        };
        let _guard = self.write_lock.lock().expect("cache lock poisoned");
        let path = self.path_for(key);
        let tmp = self.dir.join(format!("{key}.tmp"));
        let result = serde_json::to_string(&entry)
            .map_err(std::io::Error::other)
            .and_then(|json| std::fs::write(&tmp, json))
            .and_then(|_| std::fs::rename(&tmp, &path));
        if let Err(e) = result {
            log::warn!("cache write failed for {key}: {e}");
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}
