//! Flat exact vector index.
//!
//! File format (`.gwix`, little-endian):
//!
//! ```text
//! b"GWIX"  u32 version (=1)  u32 header_len  header_json
//! count × { u32 len, fragment_id; u32 len, doc_id; u32 len, language; D × f64 }
//! ```
//!
//! `header_json` is `{"dimension":D,"provider_id":"...","count":N}`. Entries
//! are written in `fragment_id` order so identical contents give identical
//! files.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};
use std::path::Path;
use std::sync::Arc;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{dot, EmbeddingVector};
use crate::fsutil::write_atomic;
use crate::text::primary_subtag;

const MAGIC: &[u8; 4] = b"GWIX";
pub const INDEX_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("dimension mismatch: index has {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("provider mismatch: index built by `{expected}`, got `{actual}`")]
    ProviderMismatch { expected: String, actual: String },
    #[error("index is empty")]
    EmptyIndex,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("no probes given")]
    NoProbes,
    #[error("probe weight {0} outside (0, 1]")]
    InvalidWeight(f64),
    #[error("vector for `{0}` is not unit-norm")]
    NotNormalized(String),
    #[error("malformed index file `{path}`: {reason}")]
    MalformedIndex { path: String, reason: String },
    #[error("i/o error on `{path}`: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub fragment_id: String,
    pub doc_id: String,
    pub language: String,
    pub vector: EmbeddingVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub fragment_id: String,
    pub doc_id: String,
    pub score: f64,
}

/// Restricts a search to some documents and/or languages. Languages match on
/// the primary subtag.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SearchFilter {
    pub doc_ids: Option<BTreeSet<String>>,
    pub languages: Option<Vec<String>>,
}

impl SearchFilter {
    fn admits(&self, meta: &EntryMeta) -> bool {
        if let Some(ids) = &self.doc_ids {
            if !ids.contains(&meta.doc_id) {
                return false;
            }
        }
        if let Some(langs) = &self.languages {
            let own = primary_subtag(&meta.language);
            if !langs.iter().any(|l| primary_subtag(l) == own) {
                return false;
            }
        }
        true
    }
}

/// A result of multi-probe search, with the index of the probe that scored it.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeHit {
    pub fragment_id: String,
    pub doc_id: String,
    pub score: f64,
    pub probe: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiProbeOutcome {
    pub hits: Vec<ProbeHit>,
    /// Union of every probe's own top-k.
    pub candidates: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq)]
struct EntryMeta {
    fragment_id: String,
    doc_id: String,
    language: String,
}

#[derive(Debug, Clone)]
struct Inner {
    dimension: usize,
    provider_id: String,
    meta: Vec<EntryMeta>,
    vectors: Vec<f64>,
    slot: HashMap<String, usize>,
}

impl Inner {
    fn vector(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dimension..(i + 1) * self.dimension]
    }

    fn check_query(&self, q: &EmbeddingVector, k: usize) -> Result<(), IndexError> {
        if self.meta.is_empty() {
            return Err(IndexError::EmptyIndex);
        }
        if k == 0 {
            return Err(IndexError::InvalidK);
        }
        if q.dimension() != self.dimension {
            return Err(IndexError::DimensionMismatch {
                expected: self.dimension,
                actual: q.dimension(),
            });
        }
        Ok(())
    }

    fn score(&self, q: &[f64], i: usize) -> f64 {
        dot(q, self.vector(i)).clamp(-1.0, 1.0)
    }

    fn order(&self, a: &(f64, usize), b: &(f64, usize)) -> Ordering {
        b.0.total_cmp(&a.0)
            .then_with(|| self.meta[a.1].fragment_id.cmp(&self.meta[b.1].fragment_id))
    }

    /// Top-k `(score, slot)` pairs among entries admitted by `filter`.
    fn top_k(&self, q: &[f64], k: usize, filter: Option<&SearchFilter>) -> Vec<(f64, usize)> {
        let mut scored: Vec<(f64, usize)> = (0..self.meta.len())
            .filter(|&i| filter.is_none_or(|f| f.admits(&self.meta[i])))
            .map(|i| (self.score(q, i), i))
            .collect();
        if scored.len() > k {
            scored.select_nth_unstable_by(k - 1, |a, b| self.order(a, b));
            scored.truncate(k);
        }
        scored.sort_unstable_by(|a, b| self.order(a, b));
        scored
    }
}

/// Exact cosine index over unit vectors. Searches share a read lock; each
/// upsert batch is applied under the write lock, so readers never see part of
/// a batch.
#[derive(Debug)]
pub struct FlatIndex {
    inner: RwLock<Inner>,
}

impl FlatIndex {
    pub fn new(dimension: usize, provider_id: impl Into<String>) -> Self {
        Self {
            inner: RwLock::new(Inner {
                dimension,
                provider_id: provider_id.into(),
                meta: Vec::new(),
                vectors: Vec::new(),
                slot: HashMap::new(),
            }),
        }
    }

    pub fn dimension(&self) -> usize {
        self.inner.read().dimension
    }

    pub fn provider_id(&self) -> String {
        self.inner.read().provider_id.clone()
    }

    pub fn len(&self) -> usize {
        self.inner.read().meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, fragment_id: &str) -> bool {
        self.inner.read().slot.contains_key(fragment_id)
    }

    /// Inserts or replaces entries; the whole batch is validated first.
    /// Returns the index size afterwards.
    pub fn upsert(&self, entries: Vec<IndexEntry>) -> Result<usize, IndexError> {
        let mut inner = self.inner.write();
        for e in &entries {
            if e.vector.dimension() != inner.dimension {
                return Err(IndexError::DimensionMismatch {
                    expected: inner.dimension,
                    actual: e.vector.dimension(),
                });
            }
            if *e.vector.provider_id != *inner.provider_id {
                return Err(IndexError::ProviderMismatch {
                    expected: inner.provider_id.clone(),
                    actual: e.vector.provider_id.to_string(),
                });
            }
            if !e.vector.is_unit() {
                return Err(IndexError::NotNormalized(e.fragment_id.clone()));
            }
        }
        for e in entries {
            let d = inner.dimension;
            match inner.slot.get(&e.fragment_id).copied() {
                Some(i) => {
                    inner.vectors[i * d..(i + 1) * d].copy_from_slice(&e.vector.values);
                    inner.meta[i].doc_id = e.doc_id;
                    inner.meta[i].language = e.language;
                }
                None => {
                    let i = inner.meta.len();
                    inner.slot.insert(e.fragment_id.clone(), i);
                    inner.vectors.extend_from_slice(&e.vector.values);
                    inner.meta.push(EntryMeta {
                        fragment_id: e.fragment_id,
                        doc_id: e.doc_id,
                        language: e.language,
                    });
                }
            }
        }
        Ok(inner.meta.len())
    }

    /// Top-k entries by cosine, ties broken by ascending fragment id.
    pub fn search(
        &self,
        query: &EmbeddingVector,
        k: usize,
        filter: Option<&SearchFilter>,
    ) -> Result<Vec<SearchResult>, IndexError> {
        let inner = self.inner.read();
        inner.check_query(query, k)?;
        Ok(inner
            .top_k(&query.values, k, filter)
            .into_iter()
            .map(|(score, i)| SearchResult {
                fragment_id: inner.meta[i].fragment_id.clone(),
                doc_id: inner.meta[i].doc_id.clone(),
                score,
            })
            .collect())
    }

    pub fn multi_probe_search(
        &self,
        probes: &[(EmbeddingVector, f64)],
        k: usize,
        filter: Option<&SearchFilter>,
    ) -> Result<Vec<SearchResult>, IndexError> {
        Ok(self
            .multi_probe_search_detailed(probes, k, filter)?
            .hits
            .into_iter()
            .map(|h| SearchResult {
                fragment_id: h.fragment_id,
                doc_id: h.doc_id,
                score: h.score,
            })
            .collect())
    }

    /// Candidates are the union of each probe's top-k. Each candidate scores
    /// `max(weight × cosine)` over all probes (earliest probe wins ties) and
    /// the best k candidates are returned.
    pub fn multi_probe_search_detailed(
        &self,
        probes: &[(EmbeddingVector, f64)],
        k: usize,
        filter: Option<&SearchFilter>,
    ) -> Result<MultiProbeOutcome, IndexError> {
        if probes.is_empty() {
            return Err(IndexError::NoProbes);
        }
        if let Some(&(_, w)) = probes.iter().find(|(_, w)| !(*w > 0.0 && *w <= 1.0)) {
            return Err(IndexError::InvalidWeight(w));
        }
        let inner = self.inner.read();
        for (p, _) in probes {
            inner.check_query(p, k)?;
        }

        let mut slots: BTreeSet<usize> = BTreeSet::new();
        for (p, _) in probes {
            slots.extend(inner.top_k(&p.values, k, filter).into_iter().map(|(_, i)| i));
        }
        let mut scored: Vec<(f64, usize, usize)> = slots
            .iter()
            .map(|&i| {
                let mut best = (f64::NEG_INFINITY, 0usize);
                for (n, (p, w)) in probes.iter().enumerate() {
                    let s = w * inner.score(&p.values, i);
                    if s > best.0 {
                        best = (s, n);
                    }
                }
                (best.0, i, best.1)
            })
            .collect();
        scored.sort_unstable_by(|a, b| inner.order(&(a.0, a.1), &(b.0, b.1)));
        scored.truncate(k);
        Ok(MultiProbeOutcome {
            hits: scored
                .into_iter()
                .map(|(score, i, probe)| ProbeHit {
                    fragment_id: inner.meta[i].fragment_id.clone(),
                    doc_id: inner.meta[i].doc_id.clone(),
                    score,
                    probe,
                })
                .collect(),
            candidates: slots.into_iter().map(|i| inner.meta[i].fragment_id.clone()).collect(),
        })
    }

    /// All entries in fragment-id order.
    pub fn entries(&self) -> Vec<IndexEntry> {
        let inner = self.inner.read();
        let provider: Arc<str> = inner.provider_id.as_str().into();
        let mut order: Vec<usize> = (0..inner.meta.len()).collect();
        order.sort_by(|&a, &b| inner.meta[a].fragment_id.cmp(&inner.meta[b].fragment_id));
        order
            .into_iter()
            .map(|i| IndexEntry {
                fragment_id: inner.meta[i].fragment_id.clone(),
                doc_id: inner.meta[i].doc_id.clone(),
                language: inner.meta[i].language.clone(),
                vector: EmbeddingVector {
                    values: inner.vector(i).to_vec(),
                    provider_id: provider.clone(),
                },
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let entries = self.entries();
        let inner = self.inner.read();
        let header = serde_json::to_vec(&FileHeader {
            dimension: inner.dimension,
            provider_id: inner.provider_id.clone(),
            count: entries.len(),
        })
        .expect("header serializes");
        let mut out = Vec::with_capacity(12 + header.len() + entries.len() * (inner.dimension * 8 + 48));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&INDEX_FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for e in &entries {
            for s in [&e.fragment_id, &e.doc_id, &e.language] {
                out.extend_from_slice(&(s.len() as u32).to_le_bytes());
                out.extend_from_slice(s.as_bytes());
            }
            for v in &e.vector.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        write_atomic(path, &self.to_bytes()).map_err(|e| IndexError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<Self, IndexError> {
        let bytes = std::fs::read(path).map_err(|e| IndexError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::from_bytes(&bytes).map_err(|reason| IndexError::MalformedIndex {
            path: path.display().to_string(),
            reason,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err("bad magic".into());
        }
        let version = r.u32()?;
        if version != INDEX_FORMAT_VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let header_len = r.u32()? as usize;
        let header: FileHeader =
            serde_json::from_slice(r.take(header_len)?).map_err(|e| format!("bad header: {e}"))?;
        if header.dimension == 0 {
            return Err("zero dimension".into());
        }
        let index = FlatIndex::new(header.dimension, header.provider_id.clone());
        let provider: Arc<str> = header.provider_id.as_str().into();
        let mut entries = Vec::with_capacity(header.count);
        for _ in 0..header.count {
            let fragment_id = r.string()?;
            let doc_id = r.string()?;
            let language = r.string()?;
            let mut values = Vec::with_capacity(header.dimension);
            for _ in 0..header.dimension {
                values.push(f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")));
            }
            entries.push(IndexEntry {
                fragment_id,
                doc_id,
                language,
                vector: EmbeddingVector {
                    values,
                    provider_id: provider.clone(),
                },
            });
        }
        if r.pos != bytes.len() {
            return Err("trailing bytes".into());
        }
        let n = index.upsert(entries).map_err(|e| e.to_string())?;
        if n != header.count {
            return Err(format!("header count {} but {n} distinct entries", header.count));
        }
        Ok(index)
    }
}

impl Clone for FlatIndex {
    fn clone(&self) -> Self {
        Self {
            inner: RwLock::new(self.inner.read().clone()),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct FileHeader {
    dimension: usize,
    provider_id: String,
    count: usize,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or("truncated file")?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String, String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| "invalid utf-8".to_string())
    }
}
