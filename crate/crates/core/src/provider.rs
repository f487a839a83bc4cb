//! HTTP JSON transport shared by all external providers (embeddings, LLM,
//! term extraction, SPARQL), with a transcript replay/record layer so the
//! online code paths can be tested without a network.
//!
//! Transcript directories hold one `{request_hash}.json` file per exchange:
//! `{"request": {...}, "response": {...}}`. The hash is the SHA-256 of the
//! canonical request JSON (method, url, query, body). Headers are excluded so
//! credentials never influence or leak into transcripts.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Method {
    Get,
    Post,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpRequest {
    pub method: Method,
    pub url: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub query: Vec<(String, String)>,
    #[serde(skip)]
    pub headers: Vec<(String, String)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub body: Option<Value>,
}

impl HttpRequest {
    pub fn post_json(url: impl Into<String>, body: Value) -> Self {
        Self {
            method: Method::Post,
            url: url.into(),
            query: Vec::new(),
            headers: Vec::new(),
            body: Some(body),
        }
    }

    pub fn get(url: impl Into<String>) -> Self {
        Self {
            method: Method::Get,
            url: url.into(),
            query: Vec::new(),
            headers: Vec::new(),
            body: None,
        }
    }

    pub fn query(mut self, key: &str, value: &str) -> Self {
        self.query.push((key.to_owned(), value.to_owned()));
        self
    }

    pub fn header(mut self, key: &str, value: &str) -> Self {
        self.headers.push((key.to_owned(), value.to_owned()));
        self
    }

    pub fn bearer(self, token: Option<&str>) -> Self {
        match token {
            Some(t) if !t.is_empty() => self.header("Authorization", &format!("Bearer {t}")),
            _ => self,
        }
    }

    /// Stable hash of the request used as the transcript key.
    pub fn request_hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("request serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum TransportError {
    #[error("connection failed: {0}")]
    Connect(String),
    #[error("HTTP status {code}")]
    Status { code: u16 },
    #[error("invalid response body: {0}")]
    Decode(String),
    #[error("no recorded transcript for request {hash}")]
    MissingTranscript { hash: String },
    #[error("transcript i/o: {0}")]
    Transcript(String),
}

impl TransportError {
    /// Connection failures, 429 and 5xx are worth retrying.
    pub fn is_transient(&self) -> bool {
        match self {
            TransportError::Connect(_) => true,
            TransportError::Status { code } => *code == 429 || *code >= 500,
            _ => false,
        }
    }
}

pub trait Transport: Send + Sync {
    fn send(&self, request: &HttpRequest) -> Result<Value, TransportError>;
}

/// Failure of a named external provider.
#[derive(Debug, Clone, Error, PartialEq)]
#[error("provider `{provider}` unavailable: {message}")]
pub struct ProviderError {
    pub provider: String,
    pub message: String,
}

impl ProviderError {
    pub fn new(provider: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            provider: provider.into(),
            message: message.into(),
        }
    }
}

/// Blocking HTTP transport.
pub struct UreqTransport {
    agent: ureq::Agent,
}

impl UreqTransport {
    pub fn new(timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build();
        Self {
            agent: config.into(),
        }
    }
}

impl Default for UreqTransport {
    fn default() -> Self {
        Self::new(Duration::from_secs(60))
    }
}

impl Transport for UreqTransport {
    fn send(&self, request: &HttpRequest) -> Result<Value, TransportError> {
        let response = match request.method {
            Method::Get => {
                let mut req = self.agent.get(&request.url);
                for (k, v) in &request.query {
                    req = req.query(k, v);
                }
                for (k, v) in &request.headers {
                    req = req.header(k, v);
                }
                req.call()
            }
            Method::Post => {
                let mut req = self.agent.post(&request.url);
                for (k, v) in &request.query {
                    req = req.query(k, v);
                }
                for (k, v) in &request.headers {
                    req = req.header(k, v);
                }
                req.send_json(request.body.as_ref().unwrap_or(&Value::Null))
            }
        };
        let mut response = response.map_err(|e| TransportError::Connect(e.to_string()))?;
        let status = response.status().as_u16();
        if !(200..300).contains(&status) {
            return Err(TransportError::Status { code: status });
        }
        response
            .body_mut()
            .read_json::<Value>()
            .map_err(|e| TransportError::Decode(e.to_string()))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TranscriptEntry {
    request: HttpRequest,
    response: Value,
}

/// Serves responses from a transcript directory; never touches the network.
pub struct ReplayTransport {
    dir: PathBuf,
}

impl ReplayTransport {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }
}

impl Transport for ReplayTransport {
    fn send(&self, request: &HttpRequest) -> Result<Value, TransportError> {
        let hash = request.request_hash();
        let path = self.dir.join(format!("{hash}.json"));
        let raw = match std::fs::read_to_string(&path) {
            Ok(raw) => raw,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(TransportError::MissingTranscript { hash })
            }
            Err(e) => return Err(TransportError::Transcript(e.to_string())),
        };
        let entry: TranscriptEntry =
            serde_json::from_str(&raw).map_err(|e| TransportError::Transcript(e.to_string()))?;
        Ok(entry.response)
    }
}

/// Forwards to an inner transport and writes every successful exchange to a
/// transcript directory.
pub struct RecordingTransport<T> {
    inner: T,
    dir: PathBuf,
}

impl<T: Transport> RecordingTransport<T> {
    pub fn new(inner: T, dir: impl Into<PathBuf>) -> Self {
        Self {
            inner,
            dir: dir.into(),
        }
    }
}

impl<T: Transport> Transport for RecordingTransport<T> {
    fn send(&self, request: &HttpRequest) -> Result<Value, TransportError> {
        let response = self.inner.send(request)?;
        let entry = TranscriptEntry {
            request: request.clone(),
            response: response.clone(),
        };
        let path = self.dir.join(format!("{}.json", request.request_hash()));
        let text = serde_json::to_string_pretty(&entry).expect("transcript serializes") + "\n";
        crate::fsutil::write_atomic(&path, text.as_bytes())
            .map_err(|e| TransportError::Transcript(e.to_string()))?;
        Ok(response)
    }
}

impl<T: Transport + ?Sized> Transport for std::sync::Arc<T> {
    fn send(&self, request: &HttpRequest) -> Result<Value, TransportError> {
        (**self).send(request)
    }
}

/// Retry policy: up to `retries` extra attempts on transient errors with
/// delays `base, 2*base, 4*base, ...`.
#[derive(Debug, Clone, Copy)]
pub struct Backoff {
    pub retries: u32,
    pub base: Duration,
}

impl Default for Backoff {
    fn default() -> Self {
        Self {
            retries: 3,
            base: Duration::from_millis(200),
        }
    }
}

impl Backoff {
    pub fn none() -> Self {
        Self {
            retries: 0,
            base: Duration::ZERO,
        }
    }

    pub fn run<T>(
        &self,
        mut op: impl FnMut() -> Result<T, TransportError>,
    ) -> Result<T, TransportError> {
        let mut attempt = 0;
        loop {
            match op() {
                Err(e) if e.is_transient() && attempt < self.retries => {
                    std::thread::sleep(self.base * 2u32.pow(attempt));
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

/// Blocking token bucket for client-side rate limiting.
pub struct TokenBucket {
    capacity: f64,
    per_second: f64,
    state: Mutex<(f64, Instant)>,
}

impl TokenBucket {
    pub fn new(capacity: u32, per_second: f64) -> Self {
        Self {
            capacity: f64::from(capacity),
            per_second,
            state: Mutex::new((f64::from(capacity), Instant::now())),
        }
    }

    /// Takes one token, sleeping until one is available.
    pub fn acquire(&self) {
        loop {
            let wait = {
                let mut state = self.state.lock();
                let now = Instant::now();
                let refill = now.duration_since(state.1).as_secs_f64() * self.per_second;
                state.0 = (state.0 + refill).min(self.capacity);
                state.1 = now;
                if state.0 >= 1.0 {
                    state.0 -= 1.0;
                    return;
                }
                (1.0 - state.0) / self.per_second
            };
            std::thread::sleep(Duration::from_secs_f64(wait));
        }
    }
}

/// Loads an API key from the named environment variable, if set.
pub fn env_secret(var: Option<&str>) -> Option<String> {
    var.and_then(|v| std::env::var(v).ok()).filter(|s| !s.is_empty())
}

pub fn transcript_path(dir: &Path, request: &HttpRequest) -> PathBuf {
    dir.join(format!("{}.json", request.request_hash()))
}


#[cfg(test)]
mod tests {
    use super::testing::ScriptedTransport;
    use super::*;
    use serde_json::json;

    #[test]
    fn hash_ignores_headers() {
        let a = HttpRequest::post_json("http://x/embed", json!({"texts": ["a"]}));
        let b = a.clone().bearer(Some("secret"));
        assert_eq!(a.request_hash(), b.request_hash());
        let c = HttpRequest::post_json("http://x/embed", json!({"texts": ["b"]}));
        assert_ne!(a.request_hash(), c.request_hash());
    }

    #[test]
    fn record_then_replay() {
        let dir = tempfile::tempdir().unwrap();
        let scripted = ScriptedTransport::new(vec![Ok(json!({"text": "hi"}))]);
        let rec = RecordingTransport::new(scripted, dir.path());
        let req = HttpRequest::post_json("http://llm/chat", json!({"m": 1}));
        assert_eq!(rec.send(&req).unwrap(), json!({"text": "hi"}));
        let replay = ReplayTransport::new(dir.path());
        assert_eq!(replay.send(&req).unwrap(), json!({"text": "hi"}));
        let other = HttpRequest::post_json("http://llm/chat", json!({"m": 2}));
        assert!(matches!(
            replay.send(&other),
            Err(TransportError::MissingTranscript { .. })
        ));
        assert!(transcript_path(dir.path(), &req).exists());
    }

    #[test]
    fn backoff_retries_transient_only() {
        let backoff = Backoff {
            retries: 3,
            base: Duration::from_millis(1),
        };
        let mut calls = 0;
        let out: Result<(), _> = backoff.run(|| {
            calls += 1;
            Err(TransportError::Status { code: 503 })
        });
        assert!(out.is_err());
        assert_eq!(calls, 4);

        let mut calls = 0;
        let _ = backoff.run(|| -> Result<(), _> {
            calls += 1;
            Err(TransportError::Status { code: 400 })
        });
        assert_eq!(calls, 1);

        let mut calls = 0;
        let ok = backoff.run(|| {
            calls += 1;
            if calls < 3 {
                Err(TransportError::Connect("refused".into()))
            } else {
                Ok(7)
            }
        });
        assert_eq!(ok, Ok(7));
    }

    #[test]
    fn token_bucket_throttles() {
        let bucket = TokenBucket::new(2, 100.0);
        let start = Instant::now();
        for _ in 0..4 {
            bucket.acquire();
        }
        // two tokens up front, two more at 100/s
        assert!(start.elapsed() >= Duration::from_millis(15));
    }
}
