//! The chat engine behind the CLI, the HTTP API and the C interface.
//!
//! On-disk layout under `data_dir`:
//!
//! ```text
//! collections/{id}/manifest.json      collections/{id}/fragments.jsonl
//! collections/{id}/terms.jsonl        collections/{id}/enriched.jsonl
//! collections/{id}/index.json         collections/{id}/index.gwix
//! sessions/{session_id}.jsonl
//! ```
//!
//! Readers work on immutable `Arc` snapshots of a collection. Ingest and
//! index build the next snapshot beside the current one and swap it in when
//! done, so an ask sees either the old or the new state, never a mix. Each
//! collection has one writer at a time; a second writer gets `Busy`.

pub mod config;
pub mod http;

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::Utc;
use log::{info, warn};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::embedding::{embed_texts, EmbeddingError};
use crate::fsutil::write_atomic;
use crate::index::{FlatIndex, IndexEntry, IndexError};
use crate::ingest::{build_fragment_store, parse_manifest, CollectionManifest, FragmentStore, IngestError, IngestReport};
use crate::kg::{expand_terms, link_term, EnrichedTerm, KgError};
use crate::retrieval::{retrieve, RetrievalConfig, RetrievalContext, RetrievalError};
use crate::session::{AskResponse, ChatSession, SessionError, Turn};
use crate::synthesis::{pack_context, synthesize, Answer, Generator, SynthesisError, OFFLINE_MODEL_ID};
use crate::terms::{extract_terms, ExtractConfig, TermError};
use crate::text::tokenize;

pub use config::{Providers, ServiceConfig, TransportMode};

pub const NO_MATCH_ANSWER: &str = "No passage in this collection matched the question.";

#[derive(Debug, Clone, Error, PartialEq)]
pub enum EngineError {
    #[error("{kind} `{id}` not found")]
    NotFound { kind: &'static str, id: String },
    #[error("collection `{0}` is not indexed")]
    NotIndexed(String),
    #[error("query is empty")]
    EmptyQuery,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("provider `{provider}` failed: {message}")]
    Provider { provider: String, message: String },
    #[error("collection `{0}` is being rebuilt; retry later")]
    Busy(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl From<TermError> for EngineError {
    fn from(e: TermError) -> Self {
        match e {
            TermError::EmptyQuery => EngineError::EmptyQuery,
            TermError::ExtractorUnavailable { provider, message } => EngineError::Provider { provider, message },
            TermError::NoFragments => EngineError::InvalidRequest(e.to_string()),
            TermError::Io { .. } | TermError::MalformedTable { .. } => EngineError::Io(e.to_string()),
        }
    }
}

impl From<KgError> for EngineError {
    fn from(e: KgError) -> Self {
        match e {
            KgError::KgUnavailable { source_id, message } => EngineError::Provider {
                provider: source_id,
                message,
            },
            KgError::InvalidDepth(_) => EngineError::InvalidRequest(e.to_string()),
            other => EngineError::Internal(other.to_string()),
        }
    }
}

impl From<EmbeddingError> for EngineError {
    fn from(e: EmbeddingError) -> Self {
        match e {
            EmbeddingError::ProviderUnavailable { provider, message } => EngineError::Provider { provider, message },
            EmbeddingError::DimensionMismatch { .. } => EngineError::Provider {
                provider: "embedding".into(),
                message: e.to_string(),
            },
            EmbeddingError::EmptyText { .. } => EngineError::InvalidRequest(e.to_string()),
        }
    }
}

impl From<IndexError> for EngineError {
    fn from(e: IndexError) -> Self {
        match e {
            IndexError::Io { .. } | IndexError::MalformedIndex { .. } => EngineError::Io(e.to_string()),
            other => EngineError::Internal(other.to_string()),
        }
    }
}

impl From<RetrievalError> for EngineError {
    fn from(e: RetrievalError) -> Self {
        match e {
            RetrievalError::Terms(t) => t.into(),
            RetrievalError::Kg(k) => k.into(),
            RetrievalError::Embedding(m) => m.into(),
            RetrievalError::Index(i) => i.into(),
            RetrievalError::InvalidConfig(m) => EngineError::InvalidRequest(m),
            other => EngineError::Internal(other.to_string()),
        }
    }
}

impl From<IngestError> for EngineError {
    fn from(e: IngestError) -> Self {
        match e {
            IngestError::StoreWriteError { .. } | IngestError::Io { .. } => EngineError::Io(e.to_string()),
            other => EngineError::InvalidRequest(other.to_string()),
        }
    }
}

impl From<SessionError> for EngineError {
    fn from(e: SessionError) -> Self {
        EngineError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexReport {
    pub collection_id: String,
    pub fragments_indexed: usize,
    pub fragments_skipped: Vec<String>,
    pub terms: usize,
    pub linked_terms: usize,
    pub index_size: usize,
    pub dimension: usize,
    pub provider_id: String,
    pub extractor_id: String,
    pub kg_source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectionSummary {
    pub collection_id: String,
    pub title: String,
    pub documents: usize,
    pub fragments: usize,
    pub indexed: bool,
    pub index_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub offline_mode: bool,
    pub index_sizes: BTreeMap<String, usize>,
}

pub struct IndexedCollection {
    pub index: FlatIndex,
    pub report: IndexReport,
}

/// Immutable view of one collection.
pub struct CollectionState {
    pub manifest: CollectionManifest,
    pub store: FragmentStore,
    pub indexed: Option<Arc<IndexedCollection>>,
}

#[derive(Default)]
struct CollectionSlot {
    writer: Mutex<()>,
    state: RwLock<Option<Arc<CollectionState>>>,
}

pub struct Engine {
    config: ServiceConfig,
    retrieval: RetrievalConfig,
    providers: Providers,
    collections: RwLock<BTreeMap<String, Arc<CollectionSlot>>>,
    sessions: RwLock<HashMap<String, Arc<Mutex<ChatSession>>>>,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> EngineError + '_ {
    move |e| EngineError::Io(format!("{}: {e}", path.display()))
}

impl Engine {
    /// Opens (or initializes) `config.data_dir` and loads existing
    /// collections and sessions.
    pub fn open(config: ServiceConfig) -> Result<Self, EngineError> {
        config.validate()?;
        let providers = config.build_providers()?;
        Self::with_providers(config, providers)
    }

    pub fn with_providers(config: ServiceConfig, providers: Providers) -> Result<Self, EngineError> {
        config.validate()?;
        let engine = Engine {
            retrieval: config.retrieval_config(),
            config,
            providers,
            collections: RwLock::new(BTreeMap::new()),
            sessions: RwLock::new(HashMap::new()),
        };
        std::fs::create_dir_all(engine.collections_dir()).map_err(io(&engine.config.data_dir))?;
        std::fs::create_dir_all(engine.sessions_dir()).map_err(io(&engine.config.data_dir))?;
        engine.load_collections()?;
        engine.load_sessions()?;
        Ok(engine)
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn providers(&self) -> &Providers {
        &self.providers
    }

    fn collections_dir(&self) -> PathBuf {
        self.config.data_dir.join("collections")
    }

    fn sessions_dir(&self) -> PathBuf {
        self.config.data_dir.join("sessions")
    }

    pub fn collection_dir(&self, collection_id: &str) -> PathBuf {
        self.collections_dir().join(collection_id)
    }

    fn session_path(&self, session_id: &str) -> PathBuf {
        self.sessions_dir().join(format!("{session_id}.jsonl"))
    }

    fn load_collections(&self) -> Result<(), EngineError> {
        let dir = self.collections_dir();
        let mut entries: Vec<_> = std::fs::read_dir(&dir)
            .map_err(io(&dir))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_dir())
            .collect();
        entries.sort();
        for path in entries {
            match self.load_collection(&path) {
                Ok(state) => {
                    let id = state.manifest.collection_id.clone();
                    let slot = CollectionSlot::default();
                    *slot.state.write() = Some(Arc::new(state));
                    self.collections.write().insert(id, Arc::new(slot));
                }
                Err(e) => warn!("skipping collection at {}: {e}", path.display()),
            }
        }
        Ok(())
    }

    fn load_collection(&self, dir: &Path) -> Result<CollectionState, EngineError> {
        let manifest_path = dir.join("manifest.json");
        let raw = std::fs::read_to_string(&manifest_path).map_err(io(&manifest_path))?;
        let value: Value = serde_json::from_str(&raw).map_err(|e| EngineError::Io(e.to_string()))?;
        let manifest = parse_manifest(&value)?;
        let store = FragmentStore::load(&dir.join("fragments.jsonl"))?;
        let index_path = dir.join("index.gwix");
        let report_path = dir.join("index.json");
        let mut indexed = None;
        if index_path.exists() && report_path.exists() {
            let index = FlatIndex::load(&index_path)?;
            let report: IndexReport = serde_json::from_slice(&std::fs::read(&report_path).map_err(io(&report_path))?)
                .map_err(|e| EngineError::Io(format!("{}: {e}", report_path.display())))?;
            if index.provider_id() == self.providers.embedder.provider_id() {
                indexed = Some(Arc::new(IndexedCollection { index, report }));
            } else {
                warn!(
                    "index of `{}` was built by `{}`, current embedder is `{}`; re-index to query it",
                    manifest.collection_id,
                    index.provider_id(),
                    self.providers.embedder.provider_id()
                );
            }
        }
        Ok(CollectionState {
            manifest,
            store,
            indexed,
        })
    }

    fn load_sessions(&self) -> Result<(), EngineError> {
        let dir = self.sessions_dir();
        for entry in std::fs::read_dir(&dir).map_err(io(&dir))?.filter_map(|e| e.ok()) {
            let path = entry.path();
            if path.extension().is_some_and(|e| e == "jsonl") {
                match ChatSession::load(&path) {
                    Ok(s) => {
                        self.sessions.write().insert(s.session_id.clone(), Arc::new(Mutex::new(s)));
                    }
                    Err(e) => warn!("skipping session log {}: {e}", path.display()),
                }
            }
        }
        Ok(())
    }

    fn slot(&self, collection_id: &str) -> Result<Arc<CollectionSlot>, EngineError> {
        self.collections
            .read()
            .get(collection_id)
            .cloned()
            .ok_or_else(|| EngineError::NotFound {
                kind: "collection",
                id: collection_id.to_owned(),
            })
    }

    /// Current snapshot of a collection.
    pub fn snapshot(&self, collection_id: &str) -> Result<Arc<CollectionState>, EngineError> {
        self.slot(collection_id)?
            .state
            .read()
            .clone()
            .ok_or_else(|| EngineError::NotFound {
                kind: "collection",
                id: collection_id.to_owned(),
            })
    }

    /// Splits and stores a collection, replacing any previous version and
    /// dropping its index.
    pub fn ingest(
        &self,
        manifest: &CollectionManifest,
        bodies: &BTreeMap<String, String>,
    ) -> Result<IngestReport, EngineError> {
        let (store, report) = build_fragment_store(manifest, bodies, &self.config.split_policy())?;
        if store.is_empty() {
            return Err(EngineError::InvalidRequest(format!(
                "no document of `{}` produced any fragment",
                manifest.collection_id
            )));
        }
        let slot = self
            .collections
            .write()
            .entry(manifest.collection_id.clone())
            .or_default()
            .clone();
        let _writer = slot
            .writer
            .try_lock()
            .ok_or_else(|| EngineError::Busy(manifest.collection_id.clone()))?;

        let dir = self.collection_dir(&manifest.collection_id);
        std::fs::create_dir_all(&dir).map_err(io(&dir))?;
        for stale in ["index.gwix", "index.json", "terms.jsonl", "enriched.jsonl"] {
            let p = dir.join(stale);
            if p.exists() {
                std::fs::remove_file(&p).map_err(io(&p))?;
            }
        }
        let manifest_path = dir.join("manifest.json");
        write_atomic(&manifest_path, manifest.to_json_pretty().as_bytes()).map_err(io(&manifest_path))?;
        store.persist(&dir.join("fragments.jsonl"))?;
        *slot.state.write() = Some(Arc::new(CollectionState {
            manifest: manifest.clone(),
            store,
            indexed: None,
        }));
        info!(
            "ingested `{}`: {} documents, {} fragments, {} skipped",
            report.collection_id,
            report.documents,
            report.fragments,
            report.skipped.len()
        );
        Ok(report)
    }

    /// Extracts and enriches terms, embeds every fragment and builds the
    /// vector index.
    pub fn index(&self, collection_id: &str) -> Result<IndexReport, EngineError> {
        let slot = self.slot(collection_id)?;
        let _writer = slot
            .writer
            .try_lock()
            .ok_or_else(|| EngineError::Busy(collection_id.to_owned()))?;
        let current = self.snapshot(collection_id)?;
        let store = &current.store;
        let p = &self.providers;

        let terms = extract_terms(collection_id, &store.fragments, p.extractor.as_ref(), &ExtractConfig::default())?;
        let linked = terms
            .terms
            .iter()
            .map(|t| link_term(t, p.kg.as_ref()))
            .collect::<Result<Vec<_>, _>>()?;
        let enriched = expand_terms(
            &linked,
            &self.retrieval.languages,
            self.retrieval.expansion_depth,
            p.kg.as_ref(),
            &self.retrieval.expand,
        )?;

        let (embeddable, skipped): (Vec<_>, Vec<_>) =
            store.fragments.iter().partition(|f| !tokenize(&f.text).is_empty());
        let texts: Vec<&str> = embeddable.iter().map(|f| f.text.as_str()).collect();
        let vectors = embed_texts(&texts, p.embedder.as_ref())?;
        let docs = store.document_map();
        let index = FlatIndex::new(p.embedder.dimension(), p.embedder.provider_id());
        let entries = embeddable
            .iter()
            .zip(vectors)
            .map(|(f, vector)| IndexEntry {
                fragment_id: f.fragment_id.clone(),
                doc_id: f.doc_id.clone(),
                language: docs.get(&f.doc_id).map(|d| d.language.clone()).unwrap_or_default(),
                vector,
            })
            .collect();
        let index_size = index.upsert(entries)?;

        let report = IndexReport {
            collection_id: collection_id.to_owned(),
            fragments_indexed: index_size,
            fragments_skipped: skipped.iter().map(|f| f.fragment_id.clone()).collect(),
            terms: terms.terms.len(),
            linked_terms: enriched.iter().filter(|e| e.concept.is_some()).count(),
            index_size,
            dimension: index.dimension(),
            provider_id: index.provider_id(),
            extractor_id: terms.extractor_id.clone(),
            kg_source: p.kg.source_id().to_owned(),
        };

        let dir = self.collection_dir(collection_id);
        terms.persist(&dir.join("terms.jsonl"))?;
        write_jsonl(&dir.join("enriched.jsonl"), &enriched)?;
        let report_path = dir.join("index.json");
        write_atomic(&report_path, &serde_json::to_vec_pretty(&report).expect("report serializes"))
            .map_err(io(&report_path))?;
        index.save(&dir.join("index.gwix"))?;

        *slot.state.write() = Some(Arc::new(CollectionState {
            manifest: current.manifest.clone(),
            store: current.store.clone(),
            indexed: Some(Arc::new(IndexedCollection {
                index,
                report: report.clone(),
            })),
        }));
        info!(
            "indexed `{collection_id}`: {} fragments, {} terms ({} linked)",
            report.index_size, report.terms, report.linked_terms
        );
        Ok(report)
    }

    pub fn list_collections(&self) -> Vec<CollectionSummary> {
        let slots: Vec<_> = self.collections.read().values().cloned().collect();
        slots
            .into_iter()
            .filter_map(|s| s.state.read().clone())
            .map(|st| CollectionSummary {
                collection_id: st.manifest.collection_id.clone(),
                title: st.manifest.title.clone(),
                documents: st.store.documents.len(),
                fragments: st.store.len(),
                indexed: st.indexed.is_some(),
                index_size: st.indexed.as_ref().map_or(0, |i| i.index.len()),
            })
            .collect()
    }

    pub fn manifest(&self, collection_id: &str) -> Result<CollectionManifest, EngineError> {
        Ok(self.snapshot(collection_id)?.manifest.clone())
    }

    pub fn health(&self) -> Health {
        Health {
            status: "ok".into(),
            offline_mode: self.config.offline,
            index_sizes: self
                .list_collections()
                .into_iter()
                .map(|c| (c.collection_id, c.index_size))
                .collect(),
        }
    }

    pub fn create_session(&self, collection_id: &str) -> Result<ChatSession, EngineError> {
        self.snapshot(collection_id)?;
        let session = ChatSession::new(uuid::Uuid::new_v4().simple().to_string(), collection_id.to_owned(), Utc::now());
        session.create_log(&self.session_path(&session.session_id))?;
        self.sessions
            .write()
            .insert(session.session_id.clone(), Arc::new(Mutex::new(session.clone())));
        Ok(session)
    }

    pub fn session(&self, session_id: &str) -> Result<ChatSession, EngineError> {
        Ok(self.session_handle(session_id)?.lock().clone())
    }

    fn session_handle(&self, session_id: &str) -> Result<Arc<Mutex<ChatSession>>, EngineError> {
        self.sessions
            .read()
            .get(session_id)
            .cloned()
            .ok_or_else(|| EngineError::NotFound {
                kind: "session",
                id: session_id.to_owned(),
            })
    }

    /// Answers `query` in a session and appends the turn. Asks within one
    /// session are serialized.
    pub fn ask(&self, session_id: &str, query: &str) -> Result<AskResponse, EngineError> {
        let handle = self.session_handle(session_id)?;
        let mut session = handle.lock();
        if query.trim().is_empty() {
            return Err(EngineError::EmptyQuery);
        }
        let state = self.snapshot(&session.collection_id)?;
        let indexed = state
            .indexed
            .clone()
            .ok_or_else(|| EngineError::NotIndexed(session.collection_id.clone()))?;
        let response = self.answer(&state, &indexed, &session.prior_queries(), query, session.next_turn())?;
        let turn = Turn {
            turn: response.turn,
            query: query.to_owned(),
            asked_at: Utc::now(),
            response: response.clone(),
        };
        let path = self.session_path(session_id);
        session.append(&path, turn)?;
        Ok(response)
    }

    fn answer(
        &self,
        state: &CollectionState,
        indexed: &IndexedCollection,
        prior: &[String],
        query: &str,
        turn: usize,
    ) -> Result<AskResponse, EngineError> {
        let p = &self.providers;
        let ctx = RetrievalContext {
            store: &state.store,
            index: &indexed.index,
            extractor: p.extractor.as_ref(),
            kg: p.kg.as_ref(),
            embedder: p.embedder.as_ref(),
        };
        let ranked = retrieve(query, prior, &ctx, &self.retrieval)?;
        if ranked.clusters.is_empty() {
            let answer = Answer {
                text: NO_MATCH_ANSWER.into(),
                citations: Vec::new(),
                model_id: OFFLINE_MODEL_ID.into(),
                offline: true,
            };
            return Ok(AskResponse::from_answer(turn, answer, ranked.probes_used));
        }
        let pack = pack_context(&ranked, self.config.token_budget).map_err(|e| EngineError::InvalidRequest(e.to_string()))?;
        let answer = match &p.llm {
            None => synthesize(query, &pack, &Generator::Offline),
            Some(llm) => match synthesize(query, &pack, &Generator::Llm(llm.as_ref())) {
                Err(SynthesisError::ProviderUnavailable(e)) if self.config.llm.fallback_to_offline => {
                    warn!("{e}; answering extractively");
                    synthesize(query, &pack, &Generator::Offline)
                }
                other => other,
            },
        }
        .map_err(|e| match e {
            SynthesisError::ProviderUnavailable(pe) => EngineError::Provider {
                provider: pe.provider,
                message: pe.message,
            },
            other => EngineError::Internal(other.to_string()),
        })?;
        Ok(AskResponse::from_answer(turn, answer, ranked.probes_used))
    }
}

fn write_jsonl(path: &Path, items: &[EnrichedTerm]) -> Result<(), EngineError> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("enriched term serializes"));
        out.push('\n');
    }
    write_atomic(path, out.as_bytes()).map_err(io(path))
}
