//! Content-addressed embedding cache and external embedding providers.
//!
//! The cache is an append-only JSONL file of
//! `{"hash", "model_id", "calibration_id", "vector"}` records. Entries are
//! keyed by all three fields; a later record with the same key wins.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// `calibration_id` used for uncalibrated embeddings.
pub const UNCALIBRATED: &str = "none";

/// SHA-256 over a kind tag and `(text, language)` parts.
///
/// Lengths are folded in so that part boundaries affect the hash.
pub fn content_hash(kind: &str, parts: &[(&str, &str)]) -> String {
    let mut h = Sha256::new();
    h.update(kind.as_bytes());
    h.update([0u8]);
    for (text, lang) in parts {
        h.update((lang.len() as u64).to_le_bytes());
        h.update(lang.as_bytes());
        h.update((text.len() as u64).to_le_bytes());
        h.update(text.as_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CacheKey {
    pub hash: String,
    pub model_id: String,
    pub calibration_id: String,
}

impl CacheKey {
    pub fn new(hash: impl Into<String>, model_id: impl Into<String>, calibration_id: impl Into<String>) -> Self {
        Self {
            hash: hash.into(),
            model_id: model_id.into(),
            calibration_id: calibration_id.into(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheRecord {
    hash: String,
    model_id: String,
    calibration_id: String,
    vector: Vec<f64>,
}

/// Thread-safe embedding cache, optionally backed by a JSONL file.
pub struct EmbeddingCache {
    path: Option<PathBuf>,
    entries: RwLock<HashMap<CacheKey, Arc<Vec<f64>>>>,
    writer: Mutex<Option<BufWriter<File>>>,
}

impl std::fmt::Debug for EmbeddingCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EmbeddingCache")
            .field("path", &self.path)
            .field("entries", &self.len())
            .finish()
    }
}

impl EmbeddingCache {
    pub fn in_memory() -> Self {
        Self {
            path: None,
            entries: RwLock::new(HashMap::new()),
            writer: Mutex::new(None),
        }
    }

    /// Loads `path` if it exists and appends new entries to it.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let entries = if path.exists() {
            Self::read_entries(&path)?
        } else {
            HashMap::new()
        };
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self {
            path: Some(path),
            entries: RwLock::new(entries),
            writer: Mutex::new(Some(BufWriter::new(file))),
        })
    }

    /// Opens an existing cache without permission to write.
    pub fn open_read_only(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let entries = Self::read_entries(&path)?;
        Ok(Self {
            path: Some(path),
            entries: RwLock::new(entries),
            writer: Mutex::new(None),
        })
    }

    fn read_entries(path: &Path) -> Result<HashMap<CacheKey, Arc<Vec<f64>>>> {
        let mut entries = HashMap::new();
        for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let corrupt = |reason: String| Error::CacheCorrupt {
                path: path.to_path_buf(),
                line: i + 1,
                reason,
            };
            let rec: CacheRecord = serde_json::from_str(&line).map_err(|e| corrupt(e.to_string()))?;
            if rec.vector.is_empty() || rec.vector.iter().any(|v| !v.is_finite()) {
                return Err(corrupt("empty or non-finite vector".into()));
            }
            entries.insert(
                CacheKey::new(rec.hash, rec.model_id, rec.calibration_id),
                Arc::new(rec.vector),
            );
        }
        Ok(entries)
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.entries.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &CacheKey) -> Option<Arc<Vec<f64>>> {
        self.entries.read().get(key).cloned()
    }

    /// Stores `vector` and appends it to the backing file, if any.
    pub fn insert(&self, key: CacheKey, vector: Vec<f64>) -> Result<Arc<Vec<f64>>> {
        let vector = Arc::new(vector);
        let mut writer = self.writer.lock();
        if let Some(w) = writer.as_mut() {
            let rec = CacheRecord {
                hash: key.hash.clone(),
                model_id: key.model_id.clone(),
                calibration_id: key.calibration_id.clone(),
                vector: vector.to_vec(),
            };
            serde_json::to_writer(&mut *w, &rec)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        self.entries.write().insert(key, Arc::clone(&vector));
        Ok(vector)
    }

    /// Cached value for `key`, computing and storing it on a miss.
    pub fn get_or_try_insert(&self, key: CacheKey, compute: impl FnOnce() -> Result<Vec<f64>>) -> Result<Arc<Vec<f64>>> {
        if let Some(v) = self.get(&key) {
            return Ok(v);
        }
        self.insert(key, compute()?)
    }
}

/// Where [`fetch_embeddings`] gets vectors from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProviderDescriptor {
    /// OpenAI-compatible `POST {url}` with `{"model", "input": [...]}`.
    Http {
        url: String,
        model_id: String,
        #[serde(default = "default_batch_size")]
        batch_size: usize,
    },
    /// Serve only what an existing cache already holds.
    CacheOnly { path: PathBuf, model_id: String },
}

fn default_batch_size() -> usize {
    32
}

impl ProviderDescriptor {
    pub fn model_id(&self) -> &str {
        match self {
            ProviderDescriptor::Http { model_id, .. } | ProviderDescriptor::CacheOnly { model_id, .. } => model_id,
        }
    }
}

#[derive(Serialize)]
struct EmbeddingRequest<'a> {
    model: &'a str,
    input: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    #[serde(default)]
    index: Option<usize>,
    embedding: Vec<f64>,
}

fn post_batch(client: &reqwest::blocking::Client, url: &str, model: &str, batch: &[&str]) -> Result<Vec<Vec<f64>>> {
    let resp = client
        .post(url)
        .json(&EmbeddingRequest { model, input: batch })
        .send()
        .map_err(|e| Error::Transport(e.to_string()))?;
    let status = resp.status();
    if !status.is_success() {
        return Err(Error::Transport(format!("HTTP {status} from {url}")));
    }
    let body: EmbeddingResponse = resp.json().map_err(|e| Error::Transport(e.to_string()))?;
    if body.data.len() != batch.len() {
        return Err(Error::Transport(format!(
            "expected {} embeddings, got {}",
            batch.len(),
            body.data.len()
        )));
    }
    let mut out: Vec<Option<Vec<f64>>> = vec![None; batch.len()];
    for (i, datum) in body.data.into_iter().enumerate() {
        let slot = datum.index.unwrap_or(i);
        match out.get_mut(slot) {
            Some(s @ None) => *s = Some(datum.embedding),
            _ => return Err(Error::Transport(format!("bad or repeated index {slot}"))),
        }
    }
    Ok(out.into_iter().map(|v| v.expect("every slot filled")).collect())
}

/// Embeds `texts`, serving hits from `cache` and persisting fetched vectors.
///
/// All vectors in one call must share a dimension.
pub fn fetch_embeddings(provider: &ProviderDescriptor, cache: &EmbeddingCache, texts: &[String]) -> Result<Vec<Vec<f64>>> {
    let model_id = provider.model_id();
    let keys: Vec<CacheKey> = texts
        .iter()
        .map(|t| CacheKey::new(content_hash("text", &[(t, "")]), model_id, UNCALIBRATED))
        .collect();
    let mut results: Vec<Option<Arc<Vec<f64>>>> = keys.iter().map(|k| cache.get(k)).collect();
    let missing: Vec<usize> = (0..texts.len()).filter(|&i| results[i].is_none()).collect();

    if !missing.is_empty() {
        match provider {
            ProviderDescriptor::CacheOnly { .. } => {
                return Err(Error::CacheMiss(keys[missing[0]].hash.clone()));
            }
            ProviderDescriptor::Http { url, batch_size, .. } => {
                let client = reqwest::blocking::Client::builder()
                    .timeout(Duration::from_secs(120))
                    .build()
                    .map_err(|e| Error::Transport(e.to_string()))?;
                for chunk in missing.chunks((*batch_size).max(1)) {
                    let batch: Vec<&str> = chunk.iter().map(|&i| texts[i].as_str()).collect();
                    let vectors = post_batch(&client, url, model_id, &batch)?;
                    for (&i, v) in chunk.iter().zip(vectors) {
                        results[i] = Some(cache.insert(keys[i].clone(), v)?);
                    }
                }
            }
        }
    }

    let vectors: Vec<Vec<f64>> = results.into_iter().map(|v| v.expect("filled").to_vec()).collect();
    if let Some(first) = vectors.first() {
        if let Some(bad) = vectors.iter().find(|v| v.len() != first.len()) {
            return Err(Error::DimensionMismatch {
                expected: first.len(),
                actual: bad.len(),
            });
        }
    }
    Ok(vectors)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_depends_on_boundaries_and_kind() {
        let a = content_hash("doc", &[("a b", "en"), ("c", "en")]);
        let b = content_hash("doc", &[("a", "en"), ("b c", "en")]);
        let c = content_hash("seg", &[("a b", "en"), ("c", "en")]);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, content_hash("doc", &[("a b", "en"), ("c", "en")]));
        assert_eq!(a.len(), 64);
    }

    #[test]
    fn persisted_entries_reload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let key = CacheKey::new("h1", "m", UNCALIBRATED);
        {
            let cache = EmbeddingCache::open(&path).unwrap();
            cache.insert(key.clone(), vec![1.0, 2.0]).unwrap();
            cache.insert(CacheKey::new("h2", "m", "B2-L1..1-uniform"), vec![3.0, 4.0]).unwrap();
        }
        let cache = EmbeddingCache::open(&path).unwrap();
        assert_eq!(cache.len(), 2);
        assert_eq!(*cache.get(&key).unwrap(), vec![1.0, 2.0]);
        let mut calls = 0;
        cache
            .get_or_try_insert(key, || {
                calls += 1;
                Ok(vec![0.0])
            })
            .unwrap();
        assert_eq!(calls, 0);
    }

    #[test]
    fn corrupt_cache_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        std::fs::write(&path, "{\"hash\":\"h\",\"model_id\":\"m\",\"calibration_id\":\"none\",\"vector\":[1.0]}\nnot json\n").unwrap();
        assert!(matches!(
            EmbeddingCache::open(&path),
            Err(Error::CacheCorrupt { line: 2, .. })
        ));
    }

    #[test]
    fn cache_only_provider_misses() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let cache = EmbeddingCache::open(&path).unwrap();
        let provider = ProviderDescriptor::CacheOnly {
            path: path.clone(),
            model_id: "ext".into(),
        };
        let texts = vec!["hello world".to_string()];
        assert!(matches!(fetch_embeddings(&provider, &cache, &texts), Err(Error::CacheMiss(_))));
        let key = CacheKey::new(content_hash("text", &[("hello world", "")]), "ext", UNCALIBRATED);
        cache.insert(key, vec![0.5, 0.5]).unwrap();
        assert_eq!(fetch_embeddings(&provider, &cache, &texts).unwrap(), vec![vec![0.5, 0.5]]);
    }

    #[test]
    fn cache_only_dimension_mismatch() {
        let cache = EmbeddingCache::in_memory();
        let provider = ProviderDescriptor::CacheOnly {
            path: PathBuf::from("unused"),
            model_id: "ext".into(),
        };
        for (t, v) in [("a", vec![1.0, 0.0]), ("b", vec![1.0])] {
            cache
                .insert(CacheKey::new(content_hash("text", &[(t, "")]), "ext", UNCALIBRATED), v)
                .unwrap();
        }
        let texts = vec!["a".to_string(), "b".to_string()];
        assert!(matches!(
            fetch_embeddings(&provider, &cache, &texts),
            Err(Error::DimensionMismatch { .. })
        ));
    }
}
