//! Weighted term extraction from fragments and queries.
//!
//! Candidates come either from the statistical fallback (every 1..=3-gram
//! whose first and last tokens are not stopwords) or from an LLM provider.
//! Either way the weights are computed the same way:
//!
//! `weight(t) = count(t) * idf(t) * tokens(t)`, with
//! `idf(t) = ln((1 + N) / (1 + df(t))) + 1`,
//!
//! where `count` is the total number of occurrences over all fragments and
//! `N`/`df` are counted over *distinct* fragment texts, so repeated
//! boilerplate paragraphs raise a term's count without diluting its idf.
//! The token-length factor favours multi-word terms over their parts.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::fsutil::write_atomic;
use crate::ingest::Fragment;
use crate::provider::{Backoff, HttpRequest, Transport};
use crate::text::{normalize_term, tokenize, Stopwords};

pub const MAX_TERM_TOKENS: usize = 10;
pub const FALLBACK_EXTRACTOR_ID: &str = "tfidf-ngram/v1";
pub const QUERY_FRAGMENT_ID: &str = "query";

#[derive(Debug, Error)]
pub enum TermError {
    #[error("query is empty")]
    EmptyQuery,
    #[error("no fragments to extract terms from")]
    NoFragments,
    #[error("term extractor `{provider}` unavailable: {message}")]
    ExtractorUnavailable { provider: String, message: String },
    #[error("malformed term table `{path}`: {reason}")]
    MalformedTable { path: String, reason: String },
    #[error("i/o error on `{path}`: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub surface: String,
    pub weight: f64,
    pub source_fragments: Vec<String>,
}

impl Term {
    pub fn token_count(&self) -> usize {
        self.surface.split(' ').count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermTable {
    pub collection_id: String,
    pub terms: Vec<Term>,
    pub extractor_id: String,
}

#[derive(Debug, Clone)]
pub struct ExtractConfig {
    pub max_terms_per_collection: usize,
    pub max_terms_per_query: usize,
    pub max_ngram: usize,
    pub stopwords: Stopwords,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            max_terms_per_collection: 1000,
            max_terms_per_query: 8,
            max_ngram: 3,
            stopwords: Stopwords::default_set(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ExtractItem<'a> {
    pub fragment_id: &'a str,
    pub text: &'a str,
}

/// What an extractor proposes as candidate terms.
#[derive(Debug, Clone, PartialEq)]
pub enum Proposals {
    /// Every stopword-trimmed n-gram up to `max_ngram` tokens.
    AllNgrams,
    /// Explicit surfaces per fragment id.
    PerFragment(HashMap<String, Vec<String>>),
}

pub trait TermExtractor: Send + Sync {
    fn extractor_id(&self) -> String;
    fn propose(&self, items: &[ExtractItem<'_>]) -> Result<Proposals, TermError>;
}

/// Offline, deterministic extractor.
#[derive(Debug, Clone, Copy, Default)]
pub struct FallbackExtractor;

impl TermExtractor for FallbackExtractor {
    fn extractor_id(&self) -> String {
        FALLBACK_EXTRACTOR_ID.into()
    }

    fn propose(&self, _items: &[ExtractItem<'_>]) -> Result<Proposals, TermError> {
        Ok(Proposals::AllNgrams)
    }
}

/// LLM-backed candidate generation over the provider protocol:
/// request `[{fragment_id, text}]`, response `[{fragment_id, terms: [..]}]`.
pub struct HttpTermExtractor {
    pub transport: Arc<dyn Transport>,
    pub endpoint: String,
    pub model_id: String,
    pub api_key: Option<String>,
    pub batch_size: usize,
    pub backoff: Backoff,
}

#[derive(Deserialize)]
struct ExtractorReply {
    fragment_id: String,
    terms: Vec<String>,
}

impl TermExtractor for HttpTermExtractor {
    fn extractor_id(&self) -> String {
        format!("llm:{}+{}", self.model_id, FALLBACK_EXTRACTOR_ID)
    }

    fn propose(&self, items: &[ExtractItem<'_>]) -> Result<Proposals, TermError> {
        let mut out: HashMap<String, Vec<String>> = HashMap::new();
        for batch in items.chunks(self.batch_size.max(1)) {
            let body: Value = batch
                .iter()
                .map(|i| json!({"fragment_id": i.fragment_id, "text": i.text}))
                .collect();
            let request =
                HttpRequest::post_json(&self.endpoint, body).bearer(self.api_key.as_deref());
            let unavailable = |message: String| TermError::ExtractorUnavailable {
                provider: self.endpoint.clone(),
                message,
            };
            let reply = self
                .backoff
                .run(|| self.transport.send(&request))
                .map_err(|e| unavailable(e.to_string()))?;
            let replies: Vec<ExtractorReply> = serde_json::from_value(reply)
                .map_err(|e| unavailable(format!("malformed response: {e}")))?;
            for r in replies {
                out.entry(r.fragment_id).or_default().extend(r.terms);
            }
        }
        Ok(Proposals::PerFragment(out))
    }
}

#[derive(Default)]
struct Stats {
    count: u64,
    fragments: BTreeSet<usize>,
    distinct: HashSet<usize>,
}

/// Counts candidate occurrences and turns them into weighted terms, sorted
/// by (weight desc, surface asc).
fn score(items: &[ExtractItem<'_>], proposals: &Proposals, config: &ExtractConfig) -> Vec<Term> {
    let tokens: Vec<Vec<String>> = items.par_iter().map(|i| tokenize(i.text)).collect();

    let mut canonical: HashMap<&[String], usize> = HashMap::new();
    let distinct_of: Vec<usize> = tokens
        .iter()
        .map(|t| {
            let next = canonical.len();
            *canonical.entry(t.as_slice()).or_insert(next)
        })
        .collect();
    let distinct_total = canonical.len();

    let per_fragment: Vec<HashMap<String, u64>> = match proposals {
        Proposals::AllNgrams => tokens
            .par_iter()
            .map(|toks| count_all_ngrams(toks, config))
            .collect(),
        Proposals::PerFragment(map) => {
            let accepted = validate_proposals(items, &tokens, map);
            let lengths: BTreeSet<usize> = accepted.iter().map(Vec::len).collect();
            tokens
                .par_iter()
                .map(|toks| count_accepted(toks, &accepted, &lengths))
                .collect()
        }
    };

    let mut stats: HashMap<String, Stats> = HashMap::new();
    for (i, counts) in per_fragment.into_iter().enumerate() {
        for (surface, c) in counts {
            let s = stats.entry(surface).or_default();
            s.count += c;
            s.fragments.insert(i);
            s.distinct.insert(distinct_of[i]);
        }
    }

    let n = distinct_total as f64;
    let mut terms: Vec<Term> = stats
        .into_iter()
        .map(|(surface, s)| {
            let idf = ((1.0 + n) / (1.0 + s.distinct.len() as f64)).ln() + 1.0;
            let len = surface.split(' ').count() as f64;
            Term {
                weight: s.count as f64 * idf * len,
                source_fragments: s
                    .fragments
                    .iter()
                    .map(|&i| items[i].fragment_id.to_owned())
                    .collect(),
                surface,
            }
        })
        .collect();
    sort_terms(&mut terms);
    terms
}

pub fn sort_terms(terms: &mut [Term]) {
    terms.sort_by(|a, b| {
        b.weight
            .total_cmp(&a.weight)
            .then_with(|| a.surface.cmp(&b.surface))
    });
}

fn count_all_ngrams(tokens: &[String], config: &ExtractConfig) -> HashMap<String, u64> {
    let mut counts = HashMap::new();
    for start in 0..tokens.len() {
        if config.stopwords.contains(&tokens[start]) {
            continue;
        }
        for len in 1..=config.max_ngram.min(tokens.len() - start) {
            let last = &tokens[start + len - 1];
            if config.stopwords.contains(last) {
                continue;
            }
            *counts
                .entry(tokens[start..start + len].join(" "))
                .or_insert(0) += 1;
        }
    }
    counts
}

fn contains_seq(haystack: &[String], needle: &[String]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

/// Keeps proposed surfaces that occur verbatim (as a token sequence) in the
/// fragment they were proposed for. Everything else is dropped.
fn validate_proposals(
    items: &[ExtractItem<'_>],
    tokens: &[Vec<String>],
    proposals: &HashMap<String, Vec<String>>,
) -> HashSet<Vec<String>> {
    let mut accepted = HashSet::new();
    for (item, toks) in items.iter().zip(tokens) {
        let Some(surfaces) = proposals.get(item.fragment_id) else {
            continue;
        };
        for s in surfaces {
            let cand = tokenize(&normalize_term(s));
            if cand.len() <= MAX_TERM_TOKENS && contains_seq(toks, &cand) {
                accepted.insert(cand);
            }
        }
    }
    accepted
}

fn count_accepted(
    tokens: &[String],
    accepted: &HashSet<Vec<String>>,
    lengths: &BTreeSet<usize>,
) -> HashMap<String, u64> {
    let mut counts = HashMap::new();
    for &len in lengths {
        for w in tokens.windows(len) {
            if accepted.contains(w) {
                *counts.entry(w.join(" ")).or_insert(0) += 1;
            }
        }
    }
    counts
}

/// Builds the collection term table.
pub fn extract_terms(
    collection_id: &str,
    fragments: &[Fragment],
    extractor: &dyn TermExtractor,
    config: &ExtractConfig,
) -> Result<TermTable, TermError> {
    if fragments.is_empty() {
        return Err(TermError::NoFragments);
    }
    let items: Vec<ExtractItem<'_>> = fragments
        .iter()
        .map(|f| ExtractItem {
            fragment_id: &f.fragment_id,
            text: &f.text,
        })
        .collect();
    let proposals = extractor.propose(&items)?;
    let mut terms = score(&items, &proposals, config);
    terms.truncate(config.max_terms_per_collection);
    Ok(TermTable {
        collection_id: collection_id.to_owned(),
        terms,
        extractor_id: extractor.extractor_id(),
    })
}

/// Terms of a single query, weights normalized so they sum to at most 1.
pub fn extract_query_terms(
    query: &str,
    extractor: &dyn TermExtractor,
    config: &ExtractConfig,
) -> Result<Vec<Term>, TermError> {
    if query.trim().is_empty() {
        return Err(TermError::EmptyQuery);
    }
    let items = [ExtractItem {
        fragment_id: QUERY_FRAGMENT_ID,
        text: query,
    }];
    let proposals = extractor.propose(&items)?;
    let mut terms = score(&items, &proposals, config);
    terms.truncate(config.max_terms_per_query);
    let total: f64 = terms.iter().map(|t| t.weight).sum();
    if total > 0.0 {
        // Slightly inflated divisor keeps the rounded sum at or below 1.
        let divisor = total * (1.0 + f64::EPSILON * (terms.len() as f64 + 1.0));
        for t in &mut terms {
            t.weight /= divisor;
        }
    }
    Ok(terms)
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum TableRecord {
    Header {
        collection_id: String,
        extractor_id: String,
        term_count: usize,
    },
    Term(Term),
}

impl TermTable {
    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&TableRecord::Header {
            collection_id: self.collection_id.clone(),
            extractor_id: self.extractor_id.clone(),
            term_count: self.terms.len(),
        })
        .expect("header serializes");
        out.push('\n');
        for t in &self.terms {
            out.push_str(&serde_json::to_string(&TableRecord::Term(t.clone())).expect("term serializes"));
            out.push('\n');
        }
        out
    }

    pub fn persist(&self, path: &Path) -> Result<(), TermError> {
        write_atomic(path, self.to_jsonl().as_bytes()).map_err(|e| TermError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<Self, TermError> {
        let shown = path.display().to_string();
        let io = |e| TermError::Io {
            path: shown.clone(),
            source: e,
        };
        let bad = |reason: String| TermError::MalformedTable {
            path: shown.clone(),
            reason,
        };
        let file = std::fs::File::open(path).map_err(io)?;
        let mut header = None;
        let mut terms = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(io)?;
            if line.is_empty() {
                continue;
            }
            match serde_json::from_str(&line).map_err(|e| bad(e.to_string()))? {
                TableRecord::Header {
                    collection_id,
                    extractor_id,
                    term_count,
                } if header.is_none() => header = Some((collection_id, extractor_id, term_count)),
                TableRecord::Header { .. } => return Err(bad("duplicate header".into())),
                TableRecord::Term(t) => terms.push(t),
            }
        }
        let (collection_id, extractor_id, count) = header.ok_or_else(|| bad("missing header".into()))?;
        if count != terms.len() {
            return Err(bad(format!("header declares {count} terms, found {}", terms.len())));
        }
        Ok(Self {
            collection_id,
            terms,
            extractor_id,
        })
    }
}
