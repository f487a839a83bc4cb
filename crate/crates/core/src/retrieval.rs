//! Query path: probe construction, multi-probe search, and document-level
//! clustering with per-document confidence.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{embed_one, Embedder, EmbeddingError, EmbeddingVector};
use crate::index::{FlatIndex, IndexError};
use crate::ingest::{DocumentMeta, FragmentStore};
use crate::kg::{expand_terms, link_term, ExpandConfig, KgClient, KgError};
use crate::terms::{extract_query_terms, ExtractConfig, TermError, TermExtractor};
use crate::text::normalize_term;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error(transparent)]
    Terms(#[from] TermError),
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error("hit references unknown document `{0}`")]
    UnknownDocId(String),
    #[error("hit references unknown fragment `{0}`")]
    UnknownFragment(String),
    #[error("invalid retrieval config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone)]
pub struct RetrievalConfig {
    pub k: usize,
    pub alpha: f64,
    pub session_decay: f64,
    pub score_floor: f64,
    pub max_probes: usize,
    pub expansion_depth: u8,
    /// Languages whose labels may become expansion probes; empty means all.
    pub languages: Vec<String>,
    pub extract: ExtractConfig,
    pub expand: ExpandConfig,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            k: 10,
            alpha: 0.7,
            session_decay: 0.5,
            score_floor: 0.05,
            max_probes: 8,
            expansion_depth: 1,
            languages: vec!["en".into(), "de".into()],
            extract: ExtractConfig::default(),
            expand: ExpandConfig::default(),
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<(), RetrievalError> {
        let bad = |m: &str| Err(RetrievalError::InvalidConfig(m.into()));
        if self.k == 0 {
            return bad("k must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must be in [0, 1]");
        }
        if !(self.session_decay > 0.0 && self.session_decay <= 1.0) {
            return bad("session_decay must be in (0, 1]");
        }
        if !(-1.0..=1.0).contains(&self.score_floor) {
            return bad("score_floor must be in [-1, 1]");
        }
        if self.max_probes == 0 {
            return bad("max_probes must be at least 1");
        }
        if self.expansion_depth > 2 {
            return bad("expansion_depth must be 0, 1 or 2");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ProbeKind {
    Query,
    Session { age: u32 },
    Expansion { language: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeInfo {
    pub label: String,
    pub weight: f64,
    #[serde(flatten)]
    pub kind: ProbeKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub info: ProbeInfo,
    pub vector: EmbeddingVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub fragment_id: String,
    pub doc_id: String,
    pub ordinal: usize,
    pub text: String,
    pub score: f64,
    pub probe_label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentCluster {
    pub doc: DocumentMeta,
    pub hits: Vec<RetrievalHit>,
    pub doc_score: f64,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedRetrieval {
    pub query: String,
    pub probes_used: Vec<ProbeInfo>,
    pub clusters: Vec<DocumentCluster>,
}

/// Everything the query path reads.
pub struct RetrievalContext<'a> {
    pub store: &'a FragmentStore,
    pub index: &'a FlatIndex,
    pub extractor: &'a dyn TermExtractor,
    pub kg: &'a dyn KgClient,
    pub embedder: &'a dyn Embedder,
}

/// Labels and weights of the probes for `query`, in issue order:
/// the query itself, the top term of each prior turn (most recent first,
/// weight `w · decay^age`), then KG expansion labels by descending weight.
/// Labels repeating an earlier probe (case-insensitively) are skipped and the
/// list is cut at `max_probes`.
pub fn plan_probes(
    query: &str,
    prior_queries: &[String],
    extractor: &dyn TermExtractor,
    kg: &dyn KgClient,
    config: &RetrievalConfig,
) -> Result<Vec<ProbeInfo>, RetrievalError> {
    config.validate()?;
    let terms = extract_query_terms(query, extractor, &config.extract)?;
    let mut probes = vec![ProbeInfo {
        label: query.to_owned(),
        weight: 1.0,
        kind: ProbeKind::Query,
    }];
    let mut seen: HashSet<String> = HashSet::from([normalize_term(query)]);

    for (age, prior) in prior_queries.iter().rev().enumerate() {
        let age = age as u32 + 1;
        let prior_terms = match extract_query_terms(prior, extractor, &config.extract) {
            Ok(t) => t,
            Err(TermError::EmptyQuery) => continue,
            Err(e) => return Err(e.into()),
        };
        let Some(top) = prior_terms.first() else { continue };
        let weight = top.weight.min(1.0) * config.session_decay.powi(age as i32);
        if weight > 0.0 && seen.insert(normalize_term(&top.surface)) {
            probes.push(ProbeInfo {
                label: top.surface.clone(),
                weight,
                kind: ProbeKind::Session { age },
            });
        }
    }

    let linked = terms
        .iter()
        .map(|t| link_term(t, kg))
        .collect::<Result<Vec<_>, _>>()?;
    let expanded = expand_terms(&linked, &config.languages, config.expansion_depth, kg, &config.expand)?;
    let mut labels: Vec<_> = expanded.into_iter().flat_map(|e| e.expansion_labels).collect();
    labels.sort_by(|a, b| b.weight.total_cmp(&a.weight).then_with(|| a.label.cmp(&b.label)));
    for l in labels {
        if l.weight > 0.0 && seen.insert(normalize_term(&l.label)) {
            probes.push(ProbeInfo {
                label: l.label,
                weight: l.weight.min(1.0),
                kind: ProbeKind::Expansion { language: l.language },
            });
        }
    }
    probes.truncate(config.max_probes);
    Ok(probes)
}

/// Embeds the planned probes. Probes without embeddable tokens are dropped;
/// if that removes the query probe the result is empty.
pub fn build_probes(
    query: &str,
    prior_queries: &[String],
    extractor: &dyn TermExtractor,
    kg: &dyn KgClient,
    embedder: &dyn Embedder,
    config: &RetrievalConfig,
) -> Result<Vec<Probe>, RetrievalError> {
    let plan = plan_probes(query, prior_queries, extractor, kg, config)?;
    let mut out = Vec::with_capacity(plan.len());
    for (i, info) in plan.into_iter().enumerate() {
        match embed_one(&info.label, embedder) {
            Ok(vector) => out.push(Probe { info, vector }),
            Err(EmbeddingError::EmptyText { .. }) if i == 0 => return Ok(Vec::new()),
            Err(EmbeddingError::EmptyText { .. }) => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(out)
}

/// `α · max + (1 − α) · mean` of the hit scores.
pub fn doc_score(scores: &[f64], alpha: f64) -> f64 {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    alpha * max + (1.0 - alpha) * mean
}

/// Document scores are cosine aggregates in [-1, 1]; confidence clamps them
/// into [0, 1].
pub fn confidence_of(cluster_doc_score: f64, _all_doc_scores: &[f64]) -> f64 {
    cluster_doc_score.clamp(0.0, 1.0)
}

/// Groups hits by document and ranks the groups by `(doc_score desc, doc_id asc)`.
pub fn cluster_and_rank(
    query: &str,
    probes_used: Vec<ProbeInfo>,
    hits: Vec<RetrievalHit>,
    metas: &BTreeMap<String, DocumentMeta>,
    alpha: f64,
) -> Result<RankedRetrieval, RetrievalError> {
    let mut groups: BTreeMap<String, Vec<RetrievalHit>> = BTreeMap::new();
    for h in hits {
        if !metas.contains_key(&h.doc_id) {
            return Err(RetrievalError::UnknownDocId(h.doc_id));
        }
        groups.entry(h.doc_id.clone()).or_default().push(h);
    }
    let mut clusters: Vec<DocumentCluster> = groups
        .into_iter()
        .map(|(doc_id, mut hits)| {
            hits.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.fragment_id.cmp(&b.fragment_id)));
            let scores: Vec<f64> = hits.iter().map(|h| h.score).collect();
            DocumentCluster {
                doc: metas[&doc_id].clone(),
                hits,
                doc_score: doc_score(&scores, alpha),
                confidence: 0.0,
            }
        })
        .collect();
    clusters.sort_by(|a, b| b.doc_score.total_cmp(&a.doc_score).then_with(|| a.doc.doc_id.cmp(&b.doc.doc_id)));
    let all: Vec<f64> = clusters.iter().map(|c| c.doc_score).collect();
    for c in &mut clusters {
        c.confidence = confidence_of(c.doc_score, &all);
    }
    Ok(RankedRetrieval {
        query: query.to_owned(),
        probes_used,
        clusters,
    })
}

/// Full query path. Deterministic for deterministic providers.
pub fn retrieve(
    query: &str,
    prior_queries: &[String],
    ctx: &RetrievalContext<'_>,
    config: &RetrievalConfig,
) -> Result<RankedRetrieval, RetrievalError> {
    let probes = build_probes(query, prior_queries, ctx.extractor, ctx.kg, ctx.embedder, config)?;
    let probes_used: Vec<ProbeInfo> = probes.iter().map(|p| p.info.clone()).collect();
    if probes.is_empty() {
        return Ok(RankedRetrieval {
            query: query.to_owned(),
            probes_used,
            clusters: Vec::new(),
        });
    }
    let weighted: Vec<(EmbeddingVector, f64)> = probes.iter().map(|p| (p.vector.clone(), p.info.weight)).collect();
    let outcome = ctx.index.multi_probe_search_detailed(&weighted, config.k, None)?;
    let mut hits = Vec::with_capacity(outcome.hits.len());
    for h in outcome.hits {
        if h.score < config.score_floor {
            continue;
        }
        let fragment = ctx
            .store
            .fragment(&h.fragment_id)
            .ok_or_else(|| RetrievalError::UnknownFragment(h.fragment_id.clone()))?;
        hits.push(RetrievalHit {
            fragment_id: h.fragment_id,
            doc_id: h.doc_id,
            ordinal: fragment.ordinal,
            text: fragment.text.clone(),
            score: h.score,
            probe_label: probes[h.probe].info.label.clone(),
        });
    }
    cluster_and_rank(query, probes_used, hits, &ctx.store.document_map(), config.alpha)
}
