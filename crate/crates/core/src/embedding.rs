//! Unit-norm text embeddings.
//!
//! The offline provider is seeded feature hashing: every token is hashed into
//! one of `D` buckets with a ±1 sign taken from a second hash, weighted by its
//! count, and the result is L2-normalized. It is deterministic and
//! order-insensitive but carries no semantics beyond shared vocabulary.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::Deserialize;
use serde_json::json;
use thiserror::Error;
use twox_hash::XxHash64;

use crate::provider::{Backoff, HttpRequest, Transport};
use crate::text::{tokenize, Stopwords};

pub const DEFAULT_DIMENSION: usize = 256;
pub const DEFAULT_SEED: u64 = 0x6777_2d65_6d62_6564;
pub const DEFAULT_BATCH_SIZE: usize = 64;
const SIGN_SEED_XOR: u64 = 0x9E37_79B9_7F4A_7C15;
const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum EmbeddingError {
    #[error("embedding provider `{provider}` unavailable: {message}")]
    ProviderUnavailable { provider: String, message: String },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("text {index} has no embeddable tokens")]
    EmptyText { index: usize },
}

/// A unit-norm vector tagged with the provider that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub provider_id: Arc<str>,
}

impl EmbeddingVector {
    /// Normalizes `values`; fails on a zero or non-finite vector.
    pub fn from_raw(mut values: Vec<f64>, provider_id: Arc<str>) -> Option<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return None;
        }
        for v in &mut values {
            *v /= norm;
        }
        Some(Self { values, provider_id })
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_unit(&self) -> bool {
        (self.norm() - 1.0).abs() <= NORM_TOLERANCE
    }
}

pub trait Embedder: Send + Sync {
    fn provider_id(&self) -> String;
    fn dimension(&self) -> usize;
    /// Embeds one batch. Called with at most `batch_size()` texts.
    fn embed_batch(&self, texts: &[&str], first_index: usize) -> Result<Vec<EmbeddingVector>, EmbeddingError>;
    fn batch_size(&self) -> usize {
        DEFAULT_BATCH_SIZE
    }
}

/// Embeds `texts` in provider-sized batches, preserving order.
pub fn embed_texts(texts: &[&str], provider: &dyn Embedder) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
    let dim = provider.dimension();
    let batch = provider.batch_size().max(1);
    let mut out = Vec::with_capacity(texts.len());
    for (n, chunk) in texts.chunks(batch).enumerate() {
        let vectors = provider.embed_batch(chunk, n * batch)?;
        if vectors.len() != chunk.len() {
            return Err(EmbeddingError::ProviderUnavailable {
                provider: provider.provider_id(),
                message: format!("returned {} vectors for {} texts", vectors.len(), chunk.len()),
            });
        }
        for v in vectors {
            if v.dimension() != dim {
                return Err(EmbeddingError::DimensionMismatch {
                    expected: dim,
                    actual: v.dimension(),
                });
            }
            debug_assert!(v.is_unit());
            out.push(v);
        }
    }
    Ok(out)
}

pub fn embed_one(text: &str, provider: &dyn Embedder) -> Result<EmbeddingVector, EmbeddingError> {
    Ok(embed_texts(&[text], provider)?.pop().expect("one vector per text"))
}

/// Cosine of two unit vectors, i.e. their dot product clamped to [-1, 1].
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbeddingError> {
    if a.dimension() != b.dimension() {
        return Err(EmbeddingError::DimensionMismatch {
            expected: a.dimension(),
            actual: b.dimension(),
        });
    }
    Ok(dot(&a.values, &b.values).clamp(-1.0, 1.0))
}

/// Sequential dot product; summation order is fixed so results are reproducible.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    pub dimension: usize,
    pub seed: u64,
    pub stopwords: Stopwords,
    id: Arc<str>,
}

impl HashingEmbedder {
    pub fn new(dimension: usize, seed: u64) -> Self {
        assert!(dimension > 0, "dimension must be positive");
        Self {
            dimension,
            seed,
            stopwords: Stopwords::default_set(),
            id: format!("feature-hash/v1/d{dimension}/s{seed}").into(),
        }
    }

    /// Bucket and sign of a token.
    pub fn slot(&self, token: &str) -> (usize, f64) {
        let bucket = XxHash64::oneshot(self.seed, token.as_bytes()) % self.dimension as u64;
        let sign = if XxHash64::oneshot(self.seed ^ SIGN_SEED_XOR, token.as_bytes()) & 1 == 0 {
            1.0
        } else {
            -1.0
        };
        (bucket as usize, sign)
    }

    /// Token counts that feed the hash; stopwords are dropped unless nothing
    /// else remains.
    pub fn token_counts(&self, text: &str) -> BTreeMap<String, u32> {
        let tokens = tokenize(text);
        let content: Vec<&String> = tokens.iter().filter(|t| !self.stopwords.contains(t)).collect();
        let chosen: Vec<&String> = if content.is_empty() { tokens.iter().collect() } else { content };
        let mut counts = BTreeMap::new();
        for t in chosen {
            *counts.entry(t.clone()).or_insert(0) += 1;
        }
        counts
    }

    pub fn embed_text(&self, text: &str) -> Option<EmbeddingVector> {
        let mut values = vec![0.0; self.dimension];
        for (token, count) in self.token_counts(text) {
            let (bucket, sign) = self.slot(&token);
            values[bucket] += sign * f64::from(count);
        }
        EmbeddingVector::from_raw(values, self.id.clone())
    }
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_DIMENSION, DEFAULT_SEED)
    }
}

impl Embedder for HashingEmbedder {
    fn provider_id(&self) -> String {
        self.id.to_string()
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed_batch(&self, texts: &[&str], first_index: usize) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| {
                self.embed_text(t)
                    .ok_or(EmbeddingError::EmptyText { index: first_index + i })
            })
            .collect()
    }

    fn batch_size(&self) -> usize {
        usize::MAX
    }
}

/// Remote provider speaking `{model_id, texts}` → `{dimension, vectors}`.
pub struct HttpEmbedder {
    pub url: String,
    pub model_id: String,
    pub api_key: Option<String>,
    pub dimension: usize,
    pub batch_size: usize,
    pub transport: Arc<dyn Transport>,
    pub backoff: Backoff,
    id: Arc<str>,
}

#[derive(Deserialize)]
struct EmbedResponse {
    dimension: usize,
    vectors: Vec<Vec<f64>>,
}

impl HttpEmbedder {
    pub fn new(url: impl Into<String>, model_id: impl Into<String>, dimension: usize, transport: Arc<dyn Transport>) -> Self {
        let model_id = model_id.into();
        Self {
            url: url.into(),
            id: format!("http:{model_id}/d{dimension}").into(),
            model_id,
            api_key: None,
            dimension,
            batch_size: DEFAULT_BATCH_SIZE,
            transport,
            backoff: Backoff::default(),
        }
    }

    fn unavailable(&self, message: impl Into<String>) -> EmbeddingError {
        EmbeddingError::ProviderUnavailable {
            provider: self.model_id.clone(),
            message: message.into(),
        }
    }
}

impl Embedder for HttpEmbedder {
    fn provider_id(&self) -> String {
        self.id.to_string()
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn batch_size(&self) -> usize {
        self.batch_size
    }

    fn embed_batch(&self, texts: &[&str], first_index: usize) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        if let Some(i) = texts.iter().position(|t| t.trim().is_empty()) {
            return Err(EmbeddingError::EmptyText { index: first_index + i });
        }
        let request = HttpRequest::post_json(&self.url, json!({"model_id": self.model_id, "texts": texts}))
            .bearer(self.api_key.as_deref());
        let value = self
            .backoff
            .run(|| self.transport.send(&request))
            .map_err(|e| self.unavailable(e.to_string()))?;
        let response: EmbedResponse =
            serde_json::from_value(value).map_err(|e| self.unavailable(format!("bad response: {e}")))?;
        if response.dimension != self.dimension {
            return Err(EmbeddingError::DimensionMismatch {
                expected: self.dimension,
                actual: response.dimension,
            });
        }
        response
            .vectors
            .into_iter()
            .map(|v| {
                if v.len() != self.dimension {
                    return Err(EmbeddingError::DimensionMismatch {
                        expected: self.dimension,
                        actual: v.len(),
                    });
                }
                EmbeddingVector::from_raw(v, self.id.clone())
                    .ok_or_else(|| self.unavailable("zero or non-finite vector"))
            })
            .collect()
    }
}
