mod common;

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};

use common::{fixtures, offline_config, SAMPLE_QUERY};
use gw_core::embedding::{Embedder, EmbeddingError, EmbeddingVector, HashingEmbedder, DEFAULT_DIMENSION, DEFAULT_SEED};
use gw_core::ingest::{load_bodies, load_manifest};
use gw_core::provider::ReplayTransport;
use gw_core::service::http::router;
use gw_core::service::{Engine, Providers};
use gw_core::synthesis::HttpLlm;
use serde_json::{json, Value};

struct Server {
    base: String,
}

fn start(engine: Engine) -> Server {
    let (tx, rx) = mpsc::channel::<SocketAddr>();
    let engine = Arc::new(engine);
    std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, router(engine)).await.unwrap();
        });
    });
    let addr = rx.recv().unwrap();
    Server {
        base: format!("http://{addr}/v1"),
    }
}

fn agent() -> ureq::Agent {
    ureq::Agent::config_builder()
        .http_status_as_error(false)
        .build()
        .into()
}

impl Server {
    fn get(&self, path: &str) -> (u16, Value) {
        let mut resp = agent().get(&format!("{}{path}", self.base)).call().unwrap();
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_string().unwrap();
        (status, serde_json::from_str(&body).unwrap_or(Value::Null))
    }

    fn post_raw(&self, path: &str, body: &str) -> (u16, Value) {
        let mut resp = agent()
            .post(&format!("{}{path}", self.base))
            .header("content-type", "application/json")
            .send(body)
            .unwrap();
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().unwrap();
        (status, serde_json::from_str(&text).unwrap_or(Value::Null))
    }

    fn post(&self, path: &str, body: Value) -> (u16, Value) {
        self.post_raw(path, &body.to_string())
    }
}

fn collection_body() -> Value {
    let manifest_path = fixtures().join("mda-mini.json");
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(&manifest_path).unwrap()).unwrap();
    let parsed = load_manifest(&manifest_path).unwrap();
    let bodies: BTreeMap<String, String> = load_bodies(&fixtures().join("mda-mini"), &parsed).unwrap();
    json!({ "manifest": manifest, "bodies": bodies })
}

#[test]
fn full_offline_flow() {
    let dir = tempfile::tempdir().unwrap();
    let server = start(Engine::open(offline_config(dir.path())).unwrap());

    let (status, health) = server.get("/healthz");
    assert_eq!(status, 200);
    assert_eq!(health["status"], "ok");
    assert_eq!(health["offline_mode"], true);

    let (status, report) = server.post("/collections", collection_body());
    assert_eq!(status, 201, "{report}");
    assert_eq!(report["documents"], 12);

    let (status, list) = server.get("/collections");
    assert_eq!(status, 200);
    assert_eq!(list["collections"][0]["collection_id"], "mda-mini");
    assert_eq!(list["collections"][0]["indexed"], false);

    let (status, created) = server.post("/sessions", json!({"collection_id": "mda-mini"}));
    assert_eq!(status, 201);
    let sid = created["session_id"].as_str().unwrap().to_owned();

    let (status, err) = server.post(&format!("/sessions/{sid}/ask"), json!({"query": SAMPLE_QUERY}));
    assert_eq!(status, 409);
    assert_eq!(err["error"]["code"], "not_indexed");

    let (status, report) = server.post("/collections/mda-mini/index", json!({}));
    assert_eq!(status, 200, "{report}");
    assert_eq!(report["kg_source"], "kos-mini");

    let (status, err) = server.post(&format!("/sessions/{sid}/ask"), json!({"query": "   "}));
    assert_eq!(status, 400);
    assert_eq!(err["error"]["code"], "empty_query");

    let (status, first) = server.post(&format!("/sessions/{sid}/ask"), json!({"query": SAMPLE_QUERY}));
    assert_eq!(status, 200, "{first}");
    assert!(!first["answer_text"].as_str().unwrap().is_empty());
    let citations = first["citations"].as_array().unwrap();
    assert!(!citations.is_empty());
    for c in citations {
        let conf = c["confidence"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&conf));
        for key in ["title", "authors", "date", "uri", "fragments"] {
            assert!(c.get(key).is_some(), "citation lacks {key}");
        }
    }
    assert_eq!(first["probes_used"][0]["kind"], "query");

    let (status, second) = server.post(
        &format!("/sessions/{sid}/ask"),
        json!({"query": "how did it change in Germany"}),
    );
    assert_eq!(status, 200);
    assert!(second["probes_used"]
        .as_array()
        .unwrap()
        .iter()
        .any(|p| p["kind"] == "session" && p["age"] == 1));

    let (status, history) = server.get(&format!("/sessions/{sid}"));
    assert_eq!(status, 200);
    let turns = history["turns"].as_array().unwrap();
    assert_eq!(turns.len(), 2);
    assert_eq!(turns[0]["response"], first);
    assert_eq!(turns[1]["response"], second);
}

#[test]
fn error_statuses() {
    let dir = tempfile::tempdir().unwrap();
    let server = start(Engine::open(offline_config(dir.path())).unwrap());

    let (status, err) = server.post_raw("/collections", "{not json");
    assert_eq!(status, 400);
    assert_eq!(err["error"]["code"], "invalid_request");

    let (status, err) = server.post("/collections", json!({"manifest": {"title": "no id"}}));
    assert_eq!(status, 400, "{err}");

    let (status, err) = server.post("/sessions", json!({"collection_id": "nope"}));
    assert_eq!(status, 404);
    assert_eq!(err["error"]["code"], "not_found");

    let (status, _) = server.post("/sessions/unknown/ask", json!({"query": "x"}));
    assert_eq!(status, 404);
    let (status, _) = server.get("/sessions/unknown");
    assert_eq!(status, 404);
    let (status, _) = server.post("/collections/nope/index", json!({}));
    assert_eq!(status, 404);
    let (status, err) = server.get("/no/such/route");
    assert_eq!(status, 404);
    assert_eq!(err["error"]["code"], "not_found");
}

#[test]
fn llm_failure_is_502_with_provider_name() {
    let dir = tempfile::tempdir().unwrap();
    let transcripts = tempfile::tempdir().unwrap();
    let config = offline_config(dir.path());
    let mut providers = config.build_providers().unwrap();
    providers.llm = Some(Arc::new(HttpLlm::new(
        "https://llm.invalid/v1/complete",
        "test-llm",
        Arc::new(ReplayTransport::new(transcripts.path())),
    )));
    let engine = Engine::with_providers(config, providers).unwrap();
    common::ingest_mini(&engine);
    engine.index("mda-mini").unwrap();
    let server = start(engine);

    let (_, created) = server.post("/sessions", json!({"collection_id": "mda-mini"}));
    let sid = created["session_id"].as_str().unwrap();
    let (status, err) = server.post(&format!("/sessions/{sid}/ask"), json!({"query": SAMPLE_QUERY}));
    assert_eq!(status, 502);
    assert_eq!(err["error"]["code"], "provider_unavailable");
    assert_eq!(err["error"]["provider"], "test-llm");
}

/// Hashing embedder that can be made to stall inside a multi-text batch.
struct GatedEmbedder {
    inner: HashingEmbedder,
    armed: AtomicBool,
    entered: Mutex<Option<mpsc::Sender<()>>>,
    release: Mutex<Option<mpsc::Receiver<()>>>,
}

impl Embedder for GatedEmbedder {
    fn provider_id(&self) -> String {
        self.inner.provider_id()
    }

    fn dimension(&self) -> usize {
        self.inner.dimension()
    }

    fn batch_size(&self) -> usize {
        self.inner.batch_size()
    }

    fn embed_batch(&self, texts: &[&str], first_index: usize) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        if texts.len() > 1 && self.armed.swap(false, Ordering::SeqCst) {
            if let Some(tx) = self.entered.lock().unwrap().take() {
                tx.send(()).unwrap();
            }
            if let Some(rx) = self.release.lock().unwrap().take() {
                rx.recv().unwrap();
            }
        }
        self.inner.embed_batch(texts, first_index)
    }
}

#[test]
fn concurrent_reindex_is_503_and_asks_see_old_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let config = offline_config(dir.path());
    let (entered_tx, entered_rx) = mpsc::channel();
    let (release_tx, release_rx) = mpsc::channel();
    let gated = Arc::new(GatedEmbedder {
        inner: HashingEmbedder::new(DEFAULT_DIMENSION, DEFAULT_SEED),
        armed: AtomicBool::new(false),
        entered: Mutex::new(Some(entered_tx)),
        release: Mutex::new(Some(release_rx)),
    });
    let base = config.build_providers().unwrap();
    let providers = Providers {
        embedder: gated.clone(),
        extractor: base.extractor,
        kg: base.kg,
        llm: None,
    };
    let engine = Engine::with_providers(config, providers).unwrap();
    common::ingest_mini(&engine);
    engine.index("mda-mini").unwrap();
    let server = Arc::new(start(engine));

    let fresh_ask = |server: &Server| {
        let (_, created) = server.post("/sessions", json!({"collection_id": "mda-mini"}));
        let sid = created["session_id"].as_str().unwrap().to_owned();
        server.post(&format!("/sessions/{sid}/ask"), json!({"query": SAMPLE_QUERY}))
    };
    let (_, before) = fresh_ask(&server);

    gated.armed.store(true, Ordering::SeqCst);
    let bg = {
        let server = server.clone();
        std::thread::spawn(move || server.post("/collections/mda-mini/index", json!({})))
    };
    entered_rx.recv().unwrap();

    let (status, err) = server.post("/collections/mda-mini/index", json!({}));
    assert_eq!(status, 503);
    assert_eq!(err["error"]["code"], "busy");
    let (status, _) = server.post("/collections", collection_body());
    assert_eq!(status, 503);

    let (status, during) = fresh_ask(&server);
    assert_eq!(status, 200);
    assert_eq!(during, before);

    release_tx.send(()).unwrap();
    let (status, _) = bg.join().unwrap();
    assert_eq!(status, 200);
    let (status, after) = fresh_ask(&server);
    assert_eq!(status, 200);
    assert_eq!(after, before);
}
