//! Paragraph splitting.
//!
//! Blank lines delimit paragraphs. Paragraphs longer than
//! `max_fragment_chars` are re-split at sentence boundaries, falling back to
//! a hard split for single over-long sentences. Pieces shorter than
//! `min_fragment_chars` are merged with their successor as long as the merged
//! piece stays within `max_fragment_chars`; a short trailing piece is merged
//! into its predecessor under the same bound.
//!
//! Spans are byte offsets into the normalized body and never start or end on
//! whitespace. Lengths are counted in Unicode scalar values.

use serde::{Deserialize, Serialize};

use super::{Document, Fragment, IngestError};
use crate::text::{char_len, normalize_body, sentence_spans};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPolicy {
    pub min_fragment_chars: usize,
    pub max_fragment_chars: usize,
}

impl Default for SplitPolicy {
    fn default() -> Self {
        Self {
            min_fragment_chars: 80,
            max_fragment_chars: 2000,
        }
    }
}

impl SplitPolicy {
    pub fn validate(&self) -> Result<(), IngestError> {
        if self.max_fragment_chars == 0 || self.min_fragment_chars > self.max_fragment_chars {
            return Err(IngestError::InvalidPolicy(*self));
        }
        Ok(())
    }
}

pub fn fragment_id(doc_id: &str, ordinal: usize) -> String {
    format!("{doc_id}:{ordinal}")
}

/// Splits one document into ordered fragments.
pub fn split_document(doc: &Document, policy: &SplitPolicy) -> Result<Vec<Fragment>, IngestError> {
    policy.validate()?;
    let body = normalize_body(&doc.body);
    if body.trim().is_empty() {
        return Err(IngestError::EmptyDocument(doc.meta.doc_id.clone()));
    }
    Ok(split_spans(&body, policy)
        .into_iter()
        .enumerate()
        .map(|(ordinal, (start, end))| Fragment {
            fragment_id: fragment_id(&doc.meta.doc_id, ordinal),
            doc_id: doc.meta.doc_id.clone(),
            ordinal,
            text: body[start..end].to_owned(),
            char_span: (start, end),
        })
        .collect())
}

/// Fragment spans over an already-normalized body.
pub fn split_spans(body: &str, policy: &SplitPolicy) -> Vec<(usize, usize)> {
    let max = policy.max_fragment_chars;
    let pieces: Vec<(usize, usize)> = paragraph_spans(body)
        .into_iter()
        .flat_map(|p| split_long(body, p, max))
        .collect();
    merge_short(body, pieces, policy)
}

fn paragraph_spans(body: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut current: Option<(usize, usize)> = None;
    let mut offset = 0;
    for line in body.split_inclusive('\n') {
        let content = line.strip_suffix('\n').unwrap_or(line);
        if content.trim().is_empty() {
            if let Some(span) = current.take() {
                spans.push(span);
            }
        } else {
            let lead = content.len() - content.trim_start().len();
            let end = offset + content.trim_end().len();
            current = Some(match current {
                Some((start, _)) => (start, end),
                None => (offset + lead, end),
            });
        }
        offset += line.len();
    }
    spans.extend(current);
    spans
}

fn span_chars(body: &str, start: usize, end: usize) -> usize {
    char_len(&body[start..end])
}

fn split_long(body: &str, (start, end): (usize, usize), max: usize) -> Vec<(usize, usize)> {
    if span_chars(body, start, end) <= max {
        return vec![(start, end)];
    }
    let mut chunks = Vec::new();
    let mut current: Option<(usize, usize)> = None;
    for (s, e) in sentence_spans(body, start, end) {
        current = match current {
            None => Some((s, e)),
            Some((cs, _)) if span_chars(body, cs, e) <= max => Some((cs, e)),
            Some(done) => {
                chunks.push(done);
                Some((s, e))
            }
        };
    }
    chunks.extend(current);
    chunks
        .into_iter()
        .flat_map(|c| hard_split(body, c, max))
        .collect()
}

fn hard_split(body: &str, (start, end): (usize, usize), max: usize) -> Vec<(usize, usize)> {
    if span_chars(body, start, end) <= max {
        return vec![(start, end)];
    }
    let mut out = Vec::new();
    let mut pos = start;
    while pos < end {
        let rest = &body[pos..end];
        let lead = rest.len() - rest.trim_start().len();
        pos += lead;
        if pos >= end {
            break;
        }
        let window = &body[pos..end];
        let cut = window
            .char_indices()
            .nth(max)
            .map_or(window.len(), |(i, _)| i);
        let piece = window[..cut].trim_end();
        if !piece.is_empty() {
            out.push((pos, pos + piece.len()));
        }
        pos += cut;
    }
    out
}

fn merge_short(body: &str, pieces: Vec<(usize, usize)>, policy: &SplitPolicy) -> Vec<(usize, usize)> {
    let (min, max) = (policy.min_fragment_chars, policy.max_fragment_chars);
    let mut out: Vec<(usize, usize)> = Vec::with_capacity(pieces.len());
    let mut pending: Option<(usize, usize)> = None;
    for piece in pieces {
        let current = match pending.take() {
            Some((ps, _)) if span_chars(body, ps, piece.1) <= max => (ps, piece.1),
            Some(short) => {
                out.push(short);
                piece
            }
            None => piece,
        };
        if span_chars(body, current.0, current.1) < min {
            pending = Some(current);
        } else {
            out.push(current);
        }
    }
    if let Some(short) = pending {
        match out.last_mut() {
            Some(last) if span_chars(body, last.0, short.1) <= max => last.1 = short.1,
            _ => out.push(short),
        }
    }
    out
}
