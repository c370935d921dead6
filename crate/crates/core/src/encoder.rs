//! State encoders: text in, fixed-width vector out.
//!
//! The hash encoder is a deterministic bag of unigram and bigram features and
//! needs no model. The remote encoder talks to an embedding server over HTTP.
//! Either can be wrapped in [`CachedEncoder`]; encoders are frozen, so cached
//! vectors are always valid.

use std::collections::HashMap;
use std::hash::Hasher;
use std::num::NonZeroUsize;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use fnv::FnvHasher;
use lru::LruCache;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("encoder config: {0}")]
    Config(String),
    #[error("request to {endpoint} failed after {attempts} attempts: {message}")]
    Transport { endpoint: String, attempts: usize, message: String },
    #[error("server returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("expected dimension {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("expected {expected} embeddings, got {got}")]
    Count { expected: usize, got: usize },
    #[error("embedding contains non-finite values")]
    NonFinite,
}

/// Immutable, cheaply clonable state vector.
#[derive(Clone, Debug, PartialEq)]
pub struct StateEmbedding(Arc<[f64]>);

impl StateEmbedding {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values.into())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

impl std::ops::Deref for StateEmbedding {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

pub trait StateEncoder: Send + Sync {
    fn dim(&self) -> usize;

    fn encode(&self, text: &str) -> Result<StateEmbedding, EncoderError>;

    /// Order-preserving; element-wise equal to [`StateEncoder::encode`].
    fn encode_batch(&self, texts: &[&str]) -> Result<Vec<StateEmbedding>, EncoderError> {
        texts.iter().map(|t| self.encode(t)).collect()
    }

    /// Hit and miss counters when the encoder caches.
    fn cache_stats(&self) -> Option<CacheStats> {
        None
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Hash,
    Remote,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    pub dim: usize,
    pub endpoint: Option<String>,
    pub normalize: bool,
    /// Entries kept by the LRU cache; 0 disables caching.
    pub cache_capacity: usize,
    pub max_in_flight: usize,
    pub max_batch: usize,
    pub timeout_secs: u64,
    pub retries: usize,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self {
            kind: EncoderKind::Hash,
            dim: 512,
            endpoint: None,
            normalize: true,
            cache_capacity: 100_000,
            max_in_flight: 4,
            max_batch: 64,
            timeout_secs: 60,
            retries: 3,
        }
    }
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.dim == 0 {
            return Err(EncoderError::Config("dim must be positive".into()));
        }
        if self.kind == EncoderKind::Remote && self.endpoint.as_deref().is_none_or(str::is_empty) {
            return Err(EncoderError::Config("remote encoder requires an endpoint".into()));
        }
        if self.max_in_flight == 0 || self.max_batch == 0 {
            return Err(EncoderError::Config("max_in_flight and max_batch must be positive".into()));
        }
        Ok(())
    }

    /// Builds the configured encoder, wrapped in a cache when `cache_capacity > 0`.
    pub fn build(&self) -> Result<Arc<dyn StateEncoder>, EncoderError> {
        self.validate()?;
        let inner: Arc<dyn StateEncoder> = match self.kind {
            EncoderKind::Hash => Arc::new(HashEncoder::new(self.dim, self.normalize)),
            EncoderKind::Remote => Arc::new(RemoteEncoder::new(self)?),
        };
        Ok(match NonZeroUsize::new(self.cache_capacity) {
            Some(cap) => Arc::new(CachedEncoder::new(inner, cap)),
            None => inner,
        })
    }
}

/// Feature-hashing encoder over lowercase unigrams and bigrams.
#[derive(Clone, Debug)]
pub struct HashEncoder {
    dim: usize,
    normalize: bool,
}

impl HashEncoder {
    pub fn new(dim: usize, normalize: bool) -> Self {
        assert!(dim > 0, "hash encoder dim must be positive");
        Self { dim, normalize }
    }

    /// Tokens are maximal runs of alphanumerics, `_` and `~`, lowercased.
    pub fn tokenize(text: &str) -> Vec<String> {
        text.split(|c: char| !(c.is_alphanumeric() || c == '_' || c == '~'))
            .filter(|t| !t.is_empty())
            .map(str::to_lowercase)
            .collect()
    }

    fn bucket(&self, feature: &[&str]) -> (usize, f64) {
        let mut h = FnvHasher::default();
        for (i, part) in feature.iter().enumerate() {
            if i > 0 {
                h.write_u8(0x1f);
            }
            h.write(part.as_bytes());
        }
        let x = h.finish();
        let sign = if x >> 63 == 1 { -1.0 } else { 1.0 };
        ((x % self.dim as u64) as usize, sign)
    }

    /// Sparse form: sorted `(bucket, value)` pairs with non-zero value.
    pub fn encode_sparse(&self, text: &str) -> Vec<(usize, f64)> {
        let dense = self.encode_dense(text);
        dense.into_iter().enumerate().filter(|(_, v)| *v != 0.0).collect()
    }

    fn encode_dense(&self, text: &str) -> Vec<f64> {
        let tokens = Self::tokenize(text);
        let mut v = vec![0.0; self.dim];
        for t in &tokens {
            let (i, s) = self.bucket(&[t]);
            v[i] += s;
        }
        for w in tokens.windows(2) {
            let (i, s) = self.bucket(&[&w[0], &w[1]]);
            v[i] += s;
        }
        if self.normalize {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.0 {
                v.iter_mut().for_each(|x| *x /= n);
            }
        }
        v
    }
}

impl StateEncoder for HashEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<StateEmbedding, EncoderError> {
        Ok(StateEmbedding::new(self.encode_dense(text)))
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EmbedRequest {
    pub texts: Vec<String>,
    pub mode: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub dim: usize,
    pub embeddings: Vec<Vec<f64>>,
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
struct Slots {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Slots {
    fn acquire(&self) -> SlotGuard<'_> {
        let mut free = self.free.lock().expect("slot lock poisoned");
        while *free == 0 {
            free = self.cv.wait(free).expect("slot lock poisoned");
        }
        *free -= 1;
        SlotGuard(self)
    }
}

struct SlotGuard<'a>(&'a Slots);

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("slot lock poisoned") += 1;
        self.0.cv.notify_one();
    }
}

/// Client for the `POST /embed` protocol.
#[derive(Debug)]
pub struct RemoteEncoder {
    url: String,
    dim: usize,
    normalize: bool,
    retries: usize,
    max_batch: usize,
    client: reqwest::blocking::Client,
    slots: Slots,
}

impl RemoteEncoder {
    pub fn new(spec: &EncoderSpec) -> Result<Self, EncoderError> {
        let endpoint = spec
            .endpoint
            .as_deref()
            .ok_or_else(|| EncoderError::Config("remote encoder requires an endpoint".into()))?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(spec.timeout_secs))
            .build()
            .map_err(|e| EncoderError::Config(e.to_string()))?;
        Ok(Self {
            url: format!("{}/embed", endpoint.trim_end_matches('/')),
            dim: spec.dim,
            normalize: spec.normalize,
            retries: spec.retries,
            max_batch: spec.max_batch.max(1),
            client,
            slots: Slots { free: Mutex::new(spec.max_in_flight.max(1)), cv: Condvar::new() },
        })
    }

    fn post(&self, texts: &[&str]) -> Result<EmbedResponse, EncoderError> {
        let body = EmbedRequest { texts: texts.iter().map(|t| t.to_string()).collect(), mode: "last_token".into() };
        let _slot = self.slots.acquire();
        let mut last = String::new();
        let attempts = self.retries + 1;
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(50 << attempt.min(6)));
            }
            match self.client.post(&self.url).json(&body).send() {
                Ok(resp) if resp.status().is_success() => {
                    return resp.json::<EmbedResponse>().map_err(|e| EncoderError::Transport {
                        endpoint: self.url.clone(),
                        attempts: attempt + 1,
                        message: format!("invalid response body: {e}"),
                    });
                }
                Ok(resp) => {
                    let status = resp.status().as_u16();
                    let text = resp.text().unwrap_or_default();
                    // Client errors will not improve on retry.
                    if (400..500).contains(&status) {
                        return Err(EncoderError::Status { status, body: text });
                    }
                    last = format!("status {status}: {text}");
                }
                Err(e) => last = e.to_string(),
            }
            log::warn!("embed request attempt {} failed: {last}", attempt + 1);
        }
        Err(EncoderError::Transport { endpoint: self.url.clone(), attempts, message: last })
    }

    fn validate(&self, resp: EmbedResponse, expected: usize) -> Result<Vec<StateEmbedding>, EncoderError> {
        if resp.embeddings.len() != expected {
            return Err(EncoderError::Count { expected, got: resp.embeddings.len() });
        }
        if resp.dim != self.dim {
            return Err(EncoderError::Dimension { expected: self.dim, got: resp.dim });
        }
        resp.embeddings
            .into_iter()
            .map(|mut v| {
                if v.len() != self.dim {
                    return Err(EncoderError::Dimension { expected: self.dim, got: v.len() });
                }
                if !v.iter().all(|x| x.is_finite()) {
                    return Err(EncoderError::NonFinite);
                }
                if self.normalize {
                    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if n > 0.0 {
                        v.iter_mut().for_each(|x| *x /= n);
                    }
                }
                Ok(StateEmbedding::new(v))
            })
            .collect()
    }
}

impl StateEncoder for RemoteEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<StateEmbedding, EncoderError> {
        Ok(self.encode_batch(&[text])?.remove(0))
    }

    fn encode_batch(&self, texts: &[&str]) -> Result<Vec<StateEmbedding>, EncoderError> {
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(self.max_batch) {
            let resp = self.post(chunk)?;
            out.extend(self.validate(resp, chunk.len())?);
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
}

impl CacheStats {
    pub fn hit_ratio(&self) -> f64 {
        let total = self.hits + self.misses;
        if total == 0 {
            0.0
        } else {
            self.hits as f64 / total as f64
        }
    }
}

/// Bounded LRU keyed by the SHA-256 of the text.
pub struct CachedEncoder {
    inner: Arc<dyn StateEncoder>,
    cache: Mutex<LruCache<[u8; 32], StateEmbedding>>,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl CachedEncoder {
    pub fn new(inner: Arc<dyn StateEncoder>, capacity: NonZeroUsize) -> Self {
        Self { inner, cache: Mutex::new(LruCache::new(capacity)), hits: AtomicU64::new(0), misses: AtomicU64::new(0) }
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats { hits: self.hits.load(Ordering::Relaxed), misses: self.misses.load(Ordering::Relaxed) }
    }

    fn key(text: &str) -> [u8; 32] {
        Sha256::digest(text.as_bytes()).into()
    }
}

impl StateEncoder for CachedEncoder {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn cache_stats(&self) -> Option<CacheStats> {
        Some(self.stats())
    }

    fn encode(&self, text: &str) -> Result<StateEmbedding, EncoderError> {
        Ok(self.encode_batch(&[text])?.remove(0))
    }

    fn encode_batch(&self, texts: &[&str]) -> Result<Vec<StateEmbedding>, EncoderError> {
        let keys: Vec<[u8; 32]> = texts.iter().map(|t| Self::key(t)).collect();
        let mut out: Vec<Option<StateEmbedding>> = {
            let mut cache = self.cache.lock().expect("cache lock poisoned");
            keys.iter().map(|k| cache.get(k).cloned()).collect()
        };
        let missing: Vec<usize> = (0..texts.len()).filter(|&i| out[i].is_none()).collect();
        self.hits.fetch_add((texts.len() - missing.len()) as u64, Ordering::Relaxed);
        self.misses.fetch_add(missing.len() as u64, Ordering::Relaxed);
        if !missing.is_empty() {
            let mut first_of: HashMap<[u8; 32], usize> = HashMap::new();
            let mut unique = Vec::new();
            for &i in &missing {
                first_of.entry(keys[i]).or_insert_with(|| {
                    unique.push(i);
                    i
                });
            }
            let fresh = self.inner.encode_batch(&unique.iter().map(|&i| texts[i]).collect::<Vec<_>>())?;
            let mut cache = self.cache.lock().expect("cache lock poisoned");
            for (&i, emb) in unique.iter().zip(fresh) {
                cache.put(keys[i], emb.clone());
                out[i] = Some(emb);
            }
            for &i in &missing {
                if out[i].is_none() {
                    out[i] = out[first_of[&keys[i]]].clone();
                }
            }
        }
        Ok(out.into_iter().map(|e| e.expect("filled above")).collect())
    }
}
