//! Context packing, prompt construction and answer generation.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::ingest::DocumentMeta;
use crate::provider::{Backoff, HttpRequest, ProviderError, TokenBucket, Transport};
use crate::retrieval::RankedRetrieval;
use crate::text::{char_len, sentence_spans};

pub const PROMPT_TEMPLATE_V1: &str = include_str!("../templates/prompt_v1.txt");
pub const PROMPT_TEMPLATE_ID: &str = "prompt/v1";
pub const OFFLINE_MODEL_ID: &str = "extractive/v1";
pub const BUDGET_SAFETY: f64 = 0.9;
pub const OFFLINE_SENTENCES: usize = 3;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum SynthesisError {
    #[error("token budget {budget} cannot fit the top document header and its best fragment ({needed} tokens)")]
    BudgetTooSmall { budget: usize, needed: usize },
    #[error("context pack is empty")]
    EmptyPack,
    #[error(transparent)]
    ProviderUnavailable(#[from] ProviderError),
}

/// Token estimate used for packing.
pub type TokenEstimator = fn(&str) -> usize;

/// `ceil(chars / 4)`.
pub fn estimate_tokens(s: &str) -> usize {
    char_len(s).div_ceil(4)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackedFragment {
    pub fragment_id: String,
    pub text: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextBlock {
    pub header: String,
    pub doc: DocumentMeta,
    pub confidence: f64,
    pub fragments: Vec<PackedFragment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextPack {
    pub blocks: Vec<ContextBlock>,
    pub token_estimate: usize,
    pub token_budget: usize,
}

impl ContextPack {
    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CitedFragment {
    pub fragment_id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Citation {
    pub doc: DocumentMeta,
    pub confidence: f64,
    pub fragments: Vec<CitedFragment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub text: String,
    pub citations: Vec<Citation>,
    pub model_id: String,
    pub offline: bool,
}

/// `title — authors (date) — uri`, with placeholders for missing fields.
pub fn provenance_header(doc: &DocumentMeta) -> String {
    let authors = if doc.authors.is_empty() {
        "unknown authors".to_string()
    } else {
        doc.authors.join(", ")
    };
    let date = doc
        .publication_date
        .map(|d| d.format("%Y-%m-%d").to_string())
        .unwrap_or_else(|| "n.d.".into());
    let uri = doc.source_uri.as_deref().unwrap_or("no source uri");
    format!("{} — {authors} ({date}) — {uri}", doc.title)
}

/// Packs clusters in rank order into `floor(0.9 · budget)` tokens. A cluster
/// that does not fit whole keeps its best-scoring fragments; packing stops at
/// the first cluster that cannot contribute a header and one fragment.
pub fn pack_context(ranked: &RankedRetrieval, budget_tokens: usize) -> Result<ContextPack, SynthesisError> {
    pack_context_with(ranked, budget_tokens, estimate_tokens)
}

pub fn pack_context_with(
    ranked: &RankedRetrieval,
    budget_tokens: usize,
    estimate: TokenEstimator,
) -> Result<ContextPack, SynthesisError> {
    let limit = (budget_tokens as f64 * BUDGET_SAFETY).floor() as usize;
    let mut used = 0usize;
    let mut blocks = Vec::new();
    for (rank, cluster) in ranked.clusters.iter().enumerate() {
        let header = provenance_header(&cluster.doc);
        let header_cost = estimate(&header);
        let Some(best) = cluster.hits.first() else { continue };
        let first_cost = header_cost + estimate(&best.text);
        if used + first_cost > limit {
            if rank == 0 {
                return Err(SynthesisError::BudgetTooSmall {
                    budget: budget_tokens,
                    needed: first_cost,
                });
            }
            break;
        }
        used += header_cost;
        let mut fragments = Vec::new();
        for hit in &cluster.hits {
            let cost = estimate(&hit.text);
            if used + cost > limit {
                break;
            }
            used += cost;
            fragments.push(PackedFragment {
                fragment_id: hit.fragment_id.clone(),
                text: hit.text.clone(),
                score: hit.score,
            });
        }
        blocks.push(ContextBlock {
            header,
            doc: cluster.doc.clone(),
            confidence: cluster.confidence,
            fragments,
        });
    }
    Ok(ContextPack {
        blocks,
        token_estimate: used,
        token_budget: budget_tokens,
    })
}

/// Fills the versioned template. Placeholders are substituted in one pass so
/// braces inside the query or sources are left alone.
pub fn format_prompt(query: &str, pack: &ContextPack) -> String {
    let mut sources = String::new();
    for (i, block) in pack.blocks.iter().enumerate() {
        sources.push_str(&format!("[SOURCE {}] {}\n", i + 1, block.header));
        for f in &block.fragments {
            sources.push_str(&f.text);
            sources.push_str("\n\n");
        }
    }
    render(PROMPT_TEMPLATE_V1, &[("{sources}", &sources), ("{query}", query)])
}

fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    'outer: while !rest.is_empty() {
        for (key, value) in vars {
            if let Some(tail) = rest.strip_prefix(key) {
                out.push_str(value);
                rest = tail;
                continue 'outer;
            }
        }
        let c = rest.chars().next().expect("non-empty");
        out.push(c);
        rest = &rest[c.len_utf8()..];
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

pub trait LlmProvider: Send + Sync {
    fn model_id(&self) -> String;
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, ProviderError>;
}

pub enum Generator<'a> {
    /// Deterministic extractive answer from the top fragment.
    Offline,
    Llm(&'a dyn LlmProvider),
}

/// Citations for every block with at least one fragment, by
/// `(confidence desc, doc_id asc)`.
pub fn citations_of(pack: &ContextPack) -> Vec<Citation> {
    let mut out: Vec<Citation> = pack
        .blocks
        .iter()
        .filter(|b| !b.fragments.is_empty())
        .map(|b| Citation {
            doc: b.doc.clone(),
            confidence: b.confidence,
            fragments: b
                .fragments
                .iter()
                .map(|f| CitedFragment {
                    fragment_id: f.fragment_id.clone(),
                    text: f.text.clone(),
                })
                .collect(),
        })
        .collect();
    out.sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then_with(|| a.doc.doc_id.cmp(&b.doc.doc_id)));
    out
}

/// `Based on {title}: ` followed by the first sentences of the top fragment.
pub fn extractive_answer(pack: &ContextPack) -> Option<String> {
    let block = pack.blocks.iter().find(|b| !b.fragments.is_empty())?;
    let text = &block.fragments[0].text;
    let spans = sentence_spans(text, 0, text.len());
    let lead = match (spans.first(), spans.get(OFFLINE_SENTENCES.min(spans.len()).saturating_sub(1))) {
        (Some(&(s, _)), Some(&(_, e))) => &text[s..e],
        _ => text.trim(),
    };
    Some(format!("Based on {}: {}", block.doc.title, lead))
}

pub fn synthesize(query: &str, pack: &ContextPack, generator: &Generator<'_>) -> Result<Answer, SynthesisError> {
    let citations = citations_of(pack);
    if citations.is_empty() {
        return Err(SynthesisError::EmptyPack);
    }
    match generator {
        Generator::Offline => Ok(Answer {
            text: extractive_answer(pack).ok_or(SynthesisError::EmptyPack)?,
            citations,
            model_id: OFFLINE_MODEL_ID.into(),
            offline: true,
        }),
        Generator::Llm(llm) => {
            let messages = [ChatMessage {
                role: "user".into(),
                content: format_prompt(query, pack),
            }];
            let text = llm.complete(&messages)?;
            if text.trim().is_empty() {
                return Err(ProviderError::new(llm.model_id(), "empty completion").into());
            }
            Ok(Answer {
                text,
                citations,
                model_id: llm.model_id(),
                offline: false,
            })
        }
    }
}

/// Chat-style HTTP provider: `{model_id, messages}` → `{text}`.
pub struct HttpLlm {
    pub url: String,
    pub model_id: String,
    pub api_key: Option<String>,
    pub transport: Arc<dyn Transport>,
    pub backoff: Backoff,
    pub rate_limit: Option<TokenBucket>,
}

impl HttpLlm {
    pub fn new(url: impl Into<String>, model_id: impl Into<String>, transport: Arc<dyn Transport>) -> Self {
        Self {
            url: url.into(),
            model_id: model_id.into(),
            api_key: None,
            transport,
            backoff: Backoff::default(),
            rate_limit: None,
        }
    }
}

#[derive(Deserialize)]
struct CompletionResponse {
    text: String,
}

impl LlmProvider for HttpLlm {
    fn model_id(&self) -> String {
        self.model_id.clone()
    }

    fn complete(&self, messages: &[ChatMessage]) -> Result<String, ProviderError> {
        if let Some(bucket) = &self.rate_limit {
            bucket.acquire();
        }
        let request = HttpRequest::post_json(&self.url, json!({"model_id": self.model_id, "messages": messages}))
            .bearer(self.api_key.as_deref());
        let value = self
            .backoff
            .run(|| self.transport.send(&request))
            .map_err(|e| ProviderError::new(&self.model_id, e.to_string()))?;
        let response: CompletionResponse = serde_json::from_value(value)
            .map_err(|e| ProviderError::new(&self.model_id, format!("bad response: {e}")))?;
        Ok(response.text)
    }
}
