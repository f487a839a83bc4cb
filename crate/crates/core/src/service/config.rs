//! Service configuration: a TOML file, then environment, then CLI flags.
//!
//! ```toml
//! data_dir = "./gw-data"
//! offline = true
//! token_budget = 2048
//!
//! [retrieval]
//! k = 10
//! alpha = 0.7
//! session_decay = 0.5
//! score_floor = 0.05
//! max_probes = 8
//! expansion_depth = 1
//! languages = ["en", "de"]
//!
//! [kg]
//! fixture = "kos-mini.ttl-json"
//! ```
//!
//! Credentials are never read from the file; only the names of the
//! environment variables holding them are.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::embedding::{Embedder, HashingEmbedder, HttpEmbedder, DEFAULT_BATCH_SIZE, DEFAULT_DIMENSION, DEFAULT_SEED};
use crate::ingest::SplitPolicy;
use crate::kg::{load_skos_fixture, EmptyKg, KgClient, ResponseCache, SparqlKgClient};
use crate::provider::{env_secret, Backoff, RecordingTransport, ReplayTransport, TokenBucket, Transport, UreqTransport};
use crate::retrieval::RetrievalConfig;
use crate::synthesis::{HttpLlm, LlmProvider};
use crate::terms::{FallbackExtractor, HttpTermExtractor, TermExtractor};

use super::EngineError;

pub const ENV_EMBEDDING_URL: &str = "GW_EMBEDDING_URL";
pub const ENV_EMBEDDING_KEY: &str = "GW_EMBEDDING_API_KEY";
pub const ENV_LLM_URL: &str = "GW_LLM_URL";
pub const ENV_LLM_KEY: &str = "GW_LLM_API_KEY";
pub const ENV_SPARQL_ENDPOINT: &str = "GW_SPARQL_ENDPOINT";
pub const ENV_KG_TOKEN: &str = "GW_KG_TOKEN";
pub const ENV_TERMS_URL: &str = "GW_TERMS_URL";
pub const ENV_TERMS_KEY: &str = "GW_TERMS_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalSettings {
    pub k: usize,
    pub alpha: f64,
    pub session_decay: f64,
    pub score_floor: f64,
    pub max_probes: usize,
    pub expansion_depth: u8,
    pub languages: Vec<String>,
}

impl Default for RetrievalSettings {
    fn default() -> Self {
        let d = RetrievalConfig::default();
        Self {
            k: d.k,
            alpha: d.alpha,
            session_decay: d.session_decay,
            score_floor: d.score_floor,
            max_probes: d.max_probes,
            expansion_depth: d.expansion_depth,
            languages: d.languages,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSettings {
    pub min_fragment_chars: usize,
    pub max_fragment_chars: usize,
}

impl Default for SplitSettings {
    fn default() -> Self {
        let d = SplitPolicy::default();
        Self {
            min_fragment_chars: d.min_fragment_chars,
            max_fragment_chars: d.max_fragment_chars,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingSettings {
    pub url: Option<String>,
    pub model_id: String,
    pub dimension: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub api_key_env: String,
}

impl Default for EmbeddingSettings {
    fn default() -> Self {
        Self {
            url: None,
            model_id: "default".into(),
            dimension: DEFAULT_DIMENSION,
            batch_size: DEFAULT_BATCH_SIZE,
            seed: DEFAULT_SEED,
            api_key_env: ENV_EMBEDDING_KEY.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmSettings {
    pub url: Option<String>,
    pub model_id: String,
    pub api_key_env: String,
    pub requests_per_second: Option<f64>,
    /// Answer extractively instead of failing when the LLM is unreachable.
    pub fallback_to_offline: bool,
}

impl Default for LlmSettings {
    fn default() -> Self {
        Self {
            url: None,
            model_id: "default".into(),
            api_key_env: ENV_LLM_KEY.into(),
            requests_per_second: None,
            fallback_to_offline: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TermSettings {
    pub url: Option<String>,
    pub model_id: String,
    pub api_key_env: String,
    pub batch_size: usize,
}

impl Default for TermSettings {
    fn default() -> Self {
        Self {
            url: None,
            model_id: "default".into(),
            api_key_env: ENV_TERMS_KEY.into(),
            batch_size: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KgSettings {
    /// Local SKOS JSON fixture; used offline and as the online default.
    pub fixture: Option<PathBuf>,
    pub sparql_endpoint: Option<String>,
    pub token_env: Option<String>,
    /// Extra predicate IRIs followed as "related" links.
    pub extra_relations: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportMode {
    #[default]
    Live,
    Record,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    pub offline: bool,
    pub token_budget: usize,
    pub http_timeout_secs: u64,
    pub transport: TransportMode,
    pub transcripts_dir: Option<PathBuf>,
    pub retrieval: RetrievalSettings,
    pub split: SplitSettings,
    pub embedding: EmbeddingSettings,
    pub llm: LlmSettings,
    pub terms: TermSettings,
    pub kg: KgSettings,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("gw-data"),
            offline: false,
            token_budget: 2048,
            http_timeout_secs: 60,
            transport: TransportMode::Live,
            transcripts_dir: None,
            retrieval: RetrievalSettings::default(),
            split: SplitSettings::default(),
            embedding: EmbeddingSettings::default(),
            llm: LlmSettings::default(),
            terms: TermSettings::default(),
            kg: KgSettings::default(),
        }
    }
}

/// The providers a configuration resolves to.
pub struct Providers {
    pub embedder: Arc<dyn Embedder>,
    pub extractor: Arc<dyn TermExtractor>,
    pub kg: Arc<dyn KgClient>,
    pub llm: Option<Arc<dyn LlmProvider>>,
}

fn env_nonempty(var: &str) -> Option<String> {
    std::env::var(var).ok().filter(|v| !v.trim().is_empty())
}

impl ServiceConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, EngineError> {
        toml::from_str(s).map_err(|e| EngineError::InvalidRequest(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, EngineError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| EngineError::Io(format!("{}: {e}", path.display())))?;
        let mut config = Self::from_toml_str(&raw)?;
        // Relative paths in the file are relative to the file.
        let base = path.parent().unwrap_or(Path::new("."));
        if config.data_dir.is_relative() {
            config.data_dir = base.join(&config.data_dir);
        }
        if let Some(f) = &config.kg.fixture {
            if f.is_relative() {
                config.kg.fixture = Some(base.join(f));
            }
        }
        if let Some(t) = &config.transcripts_dir {
            if t.is_relative() {
                config.transcripts_dir = Some(base.join(t));
            }
        }
        Ok(config)
    }

    /// Endpoint URLs from the environment override the file.
    pub fn apply_env(&mut self) {
        if let Some(v) = env_nonempty(ENV_EMBEDDING_URL) {
            self.embedding.url = Some(v);
        }
        if let Some(v) = env_nonempty(ENV_LLM_URL) {
            self.llm.url = Some(v);
        }
        if let Some(v) = env_nonempty(ENV_SPARQL_ENDPOINT) {
            self.kg.sparql_endpoint = Some(v);
        }
        if let Some(v) = env_nonempty(ENV_TERMS_URL) {
            self.terms.url = Some(v);
        }
    }

    pub fn retrieval_config(&self) -> RetrievalConfig {
        RetrievalConfig {
            k: self.retrieval.k,
            alpha: self.retrieval.alpha,
            session_decay: self.retrieval.session_decay,
            score_floor: self.retrieval.score_floor,
            max_probes: self.retrieval.max_probes,
            expansion_depth: self.retrieval.expansion_depth,
            languages: self.retrieval.languages.clone(),
            ..RetrievalConfig::default()
        }
    }

    pub fn split_policy(&self) -> SplitPolicy {
        SplitPolicy {
            min_fragment_chars: self.split.min_fragment_chars,
            max_fragment_chars: self.split.max_fragment_chars,
        }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: String| Err(EngineError::InvalidRequest(format!("config: {m}")));
        self.retrieval_config()
            .validate()
            .or_else(|e| bad(e.to_string()))?;
        self.split_policy().validate().or_else(|e| bad(e.to_string()))?;
        if self.token_budget < 16 {
            return bad("token_budget must be at least 16".into());
        }
        if self.embedding.dimension == 0 || self.embedding.batch_size == 0 {
            return bad("embedding dimension and batch_size must be positive".into());
        }
        if self.llm.requests_per_second.is_some_and(|r| r.is_nan() || r <= 0.0) {
            return bad("llm.requests_per_second must be positive".into());
        }
        if self.transport != TransportMode::Live && self.transcripts_dir.is_none() {
            return bad("record/replay transport needs transcripts_dir".into());
        }
        Ok(())
    }

    fn transport(&self) -> Arc<dyn Transport> {
        let live = || UreqTransport::new(Duration::from_secs(self.http_timeout_secs));
        match (self.transport, &self.transcripts_dir) {
            (TransportMode::Replay, Some(dir)) => Arc::new(ReplayTransport::new(dir)),
            (TransportMode::Record, Some(dir)) => Arc::new(RecordingTransport::new(live(), dir)),
            _ => Arc::new(live()),
        }
    }

    /// Offline mode uses only local providers: the hashing embedder, n-gram
    /// term extraction, the KG fixture (if any) and extractive answers.
    pub fn build_providers(&self) -> Result<Providers, EngineError> {
        let hashing = || -> Arc<dyn Embedder> { Arc::new(HashingEmbedder::new(self.embedding.dimension, self.embedding.seed)) };
        let fixture_kg = || -> Result<Arc<dyn KgClient>, EngineError> {
            Ok(match &self.kg.fixture {
                Some(p) => Arc::new(load_skos_fixture(p).map_err(|e| EngineError::InvalidRequest(e.to_string()))?),
                None => Arc::new(EmptyKg),
            })
        };
        if self.offline {
            return Ok(Providers {
                embedder: hashing(),
                extractor: Arc::new(FallbackExtractor),
                kg: fixture_kg()?,
                llm: None,
            });
        }

        let transport = self.transport();
        let backoff = Backoff::default();
        let embedder: Arc<dyn Embedder> = match &self.embedding.url {
            Some(url) => {
                let mut e = HttpEmbedder::new(url, &self.embedding.model_id, self.embedding.dimension, transport.clone());
                e.api_key = env_secret(Some(&self.embedding.api_key_env));
                e.batch_size = self.embedding.batch_size;
                Arc::new(e)
            }
            None => hashing(),
        };
        let extractor: Arc<dyn TermExtractor> = match &self.terms.url {
            Some(url) => Arc::new(HttpTermExtractor {
                transport: transport.clone(),
                endpoint: url.clone(),
                model_id: self.terms.model_id.clone(),
                api_key: env_secret(Some(&self.terms.api_key_env)),
                batch_size: self.terms.batch_size,
                backoff,
            }),
            None => Arc::new(FallbackExtractor),
        };
        let kg: Arc<dyn KgClient> = match &self.kg.sparql_endpoint {
            Some(endpoint) => {
                let cache = ResponseCache::open(&self.data_dir.join("kg-cache.jsonl"))
                    .map_err(|e| EngineError::Io(e.to_string()))?;
                let mut c = SparqlKgClient::new(endpoint, transport.clone(), cache);
                c.token = env_secret(Some(self.kg.token_env.as_deref().unwrap_or(ENV_KG_TOKEN)));
                c.extra_relations = self.kg.extra_relations.clone();
                Arc::new(c)
            }
            None => fixture_kg()?,
        };
        let llm: Option<Arc<dyn LlmProvider>> = self.llm.url.as_ref().map(|url| {
            let mut l = HttpLlm::new(url, &self.llm.model_id, transport.clone());
            l.api_key = env_secret(Some(&self.llm.api_key_env));
            l.rate_limit = self.llm.requests_per_second.map(|r| TokenBucket::new(r.ceil().max(1.0) as u32, r));
            Arc::new(l) as Arc<dyn LlmProvider>
        });
        Ok(Providers {
            embedder,
            extractor,
            kg,
            llm,
        })
    }
}
