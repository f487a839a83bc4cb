//! Chat sessions persisted as append-only JSON-lines logs.
//!
//! `sessions/{session_id}.jsonl` starts with a `session` record followed by
//! one `turn` record per answered question.

use std::io::{BufRead, BufReader};
use std::path::Path;

use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fsutil::append_line;
use crate::retrieval::ProbeInfo;
use crate::synthesis::{Answer, CitedFragment};

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("malformed session log `{path}`: {reason}")]
    MalformedLog { path: String, reason: String },
    #[error("i/o error on `{path}`: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// One cited document as sent to clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CitationView {
    pub doc_id: String,
    pub title: String,
    pub authors: Vec<String>,
    pub date: Option<NaiveDate>,
    pub uri: Option<String>,
    pub language: String,
    pub confidence: f64,
    pub fragments: Vec<CitedFragment>,
}

/// Body of a successful ask. Contains no wall-clock data, so offline asks
/// serialize identically across runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AskResponse {
    pub turn: usize,
    pub answer_text: String,
    pub citations: Vec<CitationView>,
    pub probes_used: Vec<ProbeInfo>,
    pub model_id: String,
    pub offline: bool,
}

impl AskResponse {
    pub fn from_answer(turn: usize, answer: Answer, probes_used: Vec<ProbeInfo>) -> Self {
        Self {
            turn,
            answer_text: answer.text,
            citations: answer
                .citations
                .into_iter()
                .map(|c| CitationView {
                    doc_id: c.doc.doc_id,
                    title: c.doc.title,
                    authors: c.doc.authors,
                    date: c.doc.publication_date,
                    uri: c.doc.source_uri,
                    language: c.doc.language,
                    confidence: c.confidence,
                    fragments: c.fragments,
                })
                .collect(),
            probes_used,
            model_id: answer.model_id,
            offline: answer.offline,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub turn: usize,
    pub query: String,
    pub asked_at: DateTime<Utc>,
    pub response: AskResponse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatSession {
    pub session_id: String,
    pub collection_id: String,
    pub created_at: DateTime<Utc>,
    pub turns: Vec<Turn>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum LogRecord {
    Session {
        session_id: String,
        collection_id: String,
        created_at: DateTime<Utc>,
    },
    Turn(Turn),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SessionError + '_ {
    move |e| SessionError::Io {
        path: path.display().to_string(),
        source: e,
    }
}

impl ChatSession {
    pub fn new(session_id: String, collection_id: String, created_at: DateTime<Utc>) -> Self {
        Self {
            session_id,
            collection_id,
            created_at,
            turns: Vec::new(),
        }
    }

    pub fn prior_queries(&self) -> Vec<String> {
        self.turns.iter().map(|t| t.query.clone()).collect()
    }

    pub fn next_turn(&self) -> usize {
        self.turns.len() + 1
    }

    /// Writes the opening record of a new log.
    pub fn create_log(&self, path: &Path) -> Result<(), SessionError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io_err(path))?;
        }
        let line = serde_json::to_string(&LogRecord::Session {
            session_id: self.session_id.clone(),
            collection_id: self.collection_id.clone(),
            created_at: self.created_at,
        })
        .expect("session record serializes");
        append_line(path, &line).map_err(io_err(path))
    }

    /// Appends `turn` to the log, then to memory.
    pub fn append(&mut self, path: &Path, turn: Turn) -> Result<(), SessionError> {
        let line = serde_json::to_string(&LogRecord::Turn(turn.clone())).expect("turn serializes");
        append_line(path, &line).map_err(io_err(path))?;
        self.turns.push(turn);
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SessionError> {
        let malformed = |reason: String| SessionError::MalformedLog {
            path: path.display().to_string(),
            reason,
        };
        let file = std::fs::File::open(path).map_err(io_err(path))?;
        let mut session: Option<ChatSession> = None;
        let lines: Vec<String> = BufReader::new(file)
            .lines()
            .collect::<Result<_, _>>()
            .map_err(io_err(path))?;
        let last = lines.len();
        for (n, line) in lines.into_iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record: LogRecord = match serde_json::from_str(&line) {
                Ok(r) => r,
                // A torn final line from a crash mid-append is dropped.
                Err(_) if n + 1 == last && session.is_some() => break,
                Err(e) => return Err(malformed(format!("line {}: {e}", n + 1))),
            };
            match (record, session.as_mut()) {
                (
                    LogRecord::Session {
                        session_id,
                        collection_id,
                        created_at,
                    },
                    None,
                ) => session = Some(ChatSession::new(session_id, collection_id, created_at)),
                (LogRecord::Turn(t), Some(s)) => {
                    if t.turn != s.next_turn() {
                        return Err(malformed(format!("line {}: turn {} out of order", n + 1, t.turn)));
                    }
                    s.turns.push(t);
                }
                _ => return Err(malformed(format!("line {}: unexpected record", n + 1))),
            }
        }
        session.ok_or_else(|| malformed("missing session record".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::ProbeKind;

    fn turn(n: usize, query: &str) -> Turn {
        Turn {
            turn: n,
            query: query.into(),
            asked_at: DateTime::parse_from_rfc3339("2025-01-15T10:00:00Z").unwrap().with_timezone(&Utc),
            response: AskResponse {
                turn: n,
                answer_text: "a".into(),
                citations: vec![],
                probes_used: vec![ProbeInfo {
                    label: query.into(),
                    weight: 1.0,
                    kind: ProbeKind::Query,
                }],
                model_id: "extractive/v1".into(),
                offline: true,
            },
        }
    }

    #[test]
    fn log_round_trip_and_torn_tail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sessions/s1.jsonl");
        let mut s = ChatSession::new("s1".into(), "c".into(), Utc::now());
        s.create_log(&path).unwrap();
        s.append(&path, turn(1, "first")).unwrap();
        s.append(&path, turn(2, "second")).unwrap();
        assert_eq!(ChatSession::load(&path).unwrap(), s);
        assert_eq!(s.prior_queries(), ["first", "second"]);

        append_line(&path, "{\"kind\":\"turn\",\"tu").unwrap();
        assert_eq!(ChatSession::load(&path).unwrap(), s);
    }

    #[test]
    fn rejects_out_of_order_turns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        let mut s = ChatSession::new("s".into(), "c".into(), Utc::now());
        s.create_log(&path).unwrap();
        s.append(&path, turn(2, "x")).unwrap();
        assert!(matches!(ChatSession::load(&path), Err(SessionError::MalformedLog { .. })));
    }
}
