//! Sentence embeddings behind a provider interface, plus cosine similarity.
//!
//! Two providers exist: a deterministic offline feature-hashing embedder
//! ([`local_embed`]) and an HTTP client for a remote encoder service. Either
//! can sit behind an [`EmbeddingCache`].

mod cache;
mod http;
mod local;

use std::collections::{HashMap, HashSet};
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

pub use cache::EmbeddingCache;
pub use http::{Health, HttpEncoder};
pub use local::{features, local_embed, tokenize, MIN_LOCAL_DIM};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// True for the all-zero vector produced by texts without tokens.
    pub fn is_degenerate(&self) -> bool {
        self.0.iter().all(|v| *v == 0.0)
    }
}

impl std::ops::Neg for &EmbeddingVector {
    type Output = EmbeddingVector;

    fn neg(self) -> EmbeddingVector {
        EmbeddingVector(self.0.iter().map(|v| -v).collect())
    }
}

/// NFC-normalizes, trims and collapses internal whitespace runs to a single
/// space.
pub fn normalize_text(text: &str) -> String {
    let nfc: String = text.nfc().collect();
    nfc.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Cosine similarity, clamped to `[-1, 1]`. A zero vector on either side
/// yields 0.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.0.iter().zip(&b.0) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    // sqrt(na * nb) rather than sqrt(na) * sqrt(nb): for a == b this is
    // exactly na, so self-similarity is exactly 1.
    Ok((dot / (na * nb).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Local,
    Http,
}

impl std::str::FromStr for ProviderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "local" => Ok(ProviderKind::Local),
            "http" => Ok(ProviderKind::Http),
            other => Err(Error::Config(format!("unknown provider kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    /// Output dimension of the local embedder.
    pub dim: usize,
    /// Hash seed of the local embedder.
    pub seed: u64,
    pub endpoint: String,
    pub model_id: String,
    pub cache_path: Option<PathBuf>,
    pub timeout_ms: u64,
    /// Texts per remote request.
    pub max_batch: usize,
    /// Concurrent remote requests.
    pub max_in_flight: usize,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            kind: ProviderKind::Local,
            dim: 384,
            seed: 0,
            endpoint: "http://127.0.0.1:8080".into(),
            model_id: "paraphrase-MiniLM-L6-v2".into(),
            cache_path: None,
            timeout_ms: 30_000,
            max_batch: 64,
            max_in_flight: 4,
        }
    }
}

impl ProviderConfig {
    pub fn local(dim: usize) -> Self {
        Self {
            dim,
            ..Self::default()
        }
    }

    pub fn http(endpoint: impl Into<String>, model_id: impl Into<String>) -> Self {
        Self {
            kind: ProviderKind::Http,
            endpoint: endpoint.into(),
            model_id: model_id.into(),
            ..Self::default()
        }
    }

    pub fn with_cache(mut self, path: impl Into<PathBuf>) -> Self {
        self.cache_path = Some(path.into());
        self
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            ProviderKind::Local if self.dim < MIN_LOCAL_DIM => Err(Error::Config(format!(
                "local embedding dim must be >= {MIN_LOCAL_DIM}, got {}",
                self.dim
            ))),
            ProviderKind::Http if self.endpoint.is_empty() || self.model_id.is_empty() => Err(
                Error::Config("http provider needs an endpoint and a model id".into()),
            ),
            _ if self.max_batch == 0 || self.max_in_flight == 0 => Err(Error::Config(
                "max_batch and max_in_flight must be positive".into(),
            )),
            _ => Ok(()),
        }
    }

    /// Identifies the embedding space: equal fingerprints mean
    /// interchangeable vectors.
    pub fn fingerprint(&self) -> String {
        match self.kind {
            ProviderKind::Local => format!("local:dim={}:seed={}", self.dim, self.seed),
            ProviderKind::Http => format!("http:model={}", self.model_id),
        }
    }
}

enum Backend {
    Local { dim: usize, seed: u64 },
    Http(HttpEncoder),
}

/// A configured embedding provider. Safe to share between threads.
pub struct Provider {
    config: ProviderConfig,
    backend: Backend,
    cache: Option<EmbeddingCache>,
    remote_requests: AtomicUsize,
    texts_computed: AtomicUsize,
}

impl std::fmt::Debug for Provider {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Provider")
            .field("config", &self.config)
            .field("remote_requests", &self.remote_requests())
            .finish()
    }
}

impl Provider {
    pub fn new(config: ProviderConfig) -> Result<Self> {
        config.validate()?;
        let backend = match config.kind {
            ProviderKind::Local => Backend::Local {
                dim: config.dim,
                seed: config.seed,
            },
            ProviderKind::Http => Backend::Http(HttpEncoder::new(
                &config.endpoint,
                &config.model_id,
                Duration::from_millis(config.timeout_ms),
            )?),
        };
        let cache = config.cache_path.as_ref().map(EmbeddingCache::open).transpose()?;
        Ok(Self {
            config,
            backend,
            cache,
            remote_requests: AtomicUsize::new(0),
            texts_computed: AtomicUsize::new(0),
        })
    }

    pub fn local(dim: usize) -> Self {
        Self::new(ProviderConfig::local(dim)).expect("valid local config")
    }

    pub fn config(&self) -> &ProviderConfig {
        &self.config
    }

    pub fn cache(&self) -> Option<&EmbeddingCache> {
        self.cache.as_ref()
    }

    /// `POST /embed` requests issued so far.
    pub fn remote_requests(&self) -> usize {
        self.remote_requests.load(Ordering::Relaxed)
    }

    /// Texts embedded by the backend (cache misses) so far.
    pub fn texts_computed(&self) -> usize {
        self.texts_computed.load(Ordering::Relaxed)
    }

    pub fn health(&self) -> Result<Health> {
        match &self.backend {
            Backend::Local { .. } => Ok(Health {
                status: "ok".into(),
                model: self.config.fingerprint(),
            }),
            Backend::Http(client) => client.health(),
        }
    }

    /// Cache key: provider fingerprint plus a content hash of the normalized
    /// text.
    pub fn cache_key(&self, normalized: &str) -> String {
        let text_hash = Sha256::digest(normalized.as_bytes());
        let mut h = Sha256::new();
        h.update(self.config.fingerprint().as_bytes());
        h.update([0u8]);
        h.update(text_hash);
        hex::encode(h.finalize())
    }

    pub fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        let mut out = self.embed_batch(&[text])?;
        Ok(out.pop().expect("one vector per text"))
    }

    /// Embeds every text, consulting the cache first. Output order matches
    /// input order.
    pub fn embed_batch<S: AsRef<str>>(&self, texts: &[S]) -> Result<Vec<EmbeddingVector>> {
        let normalized: Vec<String> = texts.iter().map(|t| normalize_text(t.as_ref())).collect();
        if let Some(i) = normalized.iter().position(String::is_empty) {
            return Err(Error::InvalidInput(format!("text {i} is empty")));
        }
        let keys: Vec<String> = normalized.iter().map(|t| self.cache_key(t)).collect();

        let mut found: HashMap<&str, EmbeddingVector> = HashMap::new();
        let mut missing: Vec<usize> = Vec::new();
        let mut pending: HashSet<&str> = HashSet::new();
        for (i, key) in keys.iter().enumerate() {
            if found.contains_key(key.as_str()) || !pending.insert(key.as_str()) {
                continue;
            }
            match self.cache.as_ref().and_then(|c| c.get(key)) {
                Some(v) => {
                    found.insert(key, v);
                }
                None => {
                    pending.insert(key);
                    missing.push(i);
                }
            }
        }

        if !missing.is_empty() {
            let miss_texts: Vec<String> = missing.iter().map(|&i| normalized[i].clone()).collect();
            let computed = self.compute(&miss_texts)?;
            self.texts_computed.fetch_add(computed.len(), Ordering::Relaxed);
            if let Some(cache) = &self.cache {
                cache.put_many(missing.iter().map(|&i| keys[i].as_str()).zip(&computed))?;
            }
            for (&i, v) in missing.iter().zip(computed) {
                found.insert(&keys[i], v);
            }
        }

        Ok(keys.iter().map(|k| found[k.as_str()].clone()).collect())
    }

    fn compute(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        match &self.backend {
            Backend::Local { dim, seed } => {
                Ok(texts.iter().map(|t| local_embed(t, *dim, *seed)).collect())
            }
            Backend::Http(client) => self.compute_remote(client, texts),
        }
    }

    fn compute_remote(&self, client: &HttpEncoder, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        let chunks: Vec<&[String]> = texts.chunks(self.config.max_batch).collect();
        let mut out = Vec::with_capacity(texts.len());
        for wave in chunks.chunks(self.config.max_in_flight) {
            let results: Vec<Result<Vec<EmbeddingVector>>> = std::thread::scope(|s| {
                let handles: Vec<_> = wave
                    .iter()
                    .map(|chunk| {
                        s.spawn(move || {
                            self.remote_requests.fetch_add(1, Ordering::Relaxed);
                            client.embed(chunk)
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("embedding worker panicked"))
                    .collect()
            });
            for r in results {
                out.extend(r?);
            }
        }
        let dim = out.first().map(EmbeddingVector::dim).unwrap_or(0);
        if out.iter().any(|v| v.dim() != dim) {
            return Err(Error::MalformedResponse("inconsistent dims across batches".into()));
        }
        Ok(out)
    }
}
