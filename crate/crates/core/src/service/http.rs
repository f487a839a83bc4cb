//! JSON-over-HTTP API, versioned under `/v1`.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Engine, EngineError};
use crate::ingest::parse_manifest;

#[derive(Debug, Deserialize)]
pub struct CreateCollectionRequest {
    pub manifest: Value,
    #[serde(default)]
    pub bodies: BTreeMap<String, String>,
}

#[derive(Debug, Deserialize)]
pub struct CreateSessionRequest {
    pub collection_id: String,
}

#[derive(Debug, Deserialize)]
pub struct AskRequest {
    pub query: String,
}

#[derive(Debug, Serialize)]
struct SessionCreated {
    session_id: String,
    collection_id: String,
}

impl EngineError {
    pub fn status(&self) -> StatusCode {
        match self {
            EngineError::NotFound { .. } => StatusCode::NOT_FOUND,
            EngineError::NotIndexed(_) => StatusCode::CONFLICT,
            EngineError::EmptyQuery | EngineError::InvalidRequest(_) => StatusCode::BAD_REQUEST,
            EngineError::Provider { .. } => StatusCode::BAD_GATEWAY,
            EngineError::Busy(_) => StatusCode::SERVICE_UNAVAILABLE,
            EngineError::Io(_) | EngineError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            EngineError::NotFound { .. } => "not_found",
            EngineError::NotIndexed(_) => "not_indexed",
            EngineError::EmptyQuery => "empty_query",
            EngineError::InvalidRequest(_) => "invalid_request",
            EngineError::Provider { .. } => "provider_unavailable",
            EngineError::Busy(_) => "busy",
            EngineError::Io(_) => "io_error",
            EngineError::Internal(_) => "internal",
        }
    }

    /// `{"error": {"code", "message", "provider"?}}`
    pub fn body(&self) -> Value {
        let mut err = json!({"code": self.code(), "message": self.to_string()});
        if let EngineError::Provider { provider, .. } = self {
            err["provider"] = json!(provider);
        }
        json!({ "error": err })
    }
}

impl IntoResponse for EngineError {
    fn into_response(self) -> Response {
        (self.status(), Json(self.body())).into_response()
    }
}

type ApiResult = Result<Response, EngineError>;

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, EngineError> {
    serde_json::from_slice(body).map_err(|e| EngineError::InvalidRequest(format!("request body: {e}")))
}

/// Runs blocking engine work off the async executor.
async fn blocking<T, F>(f: F) -> Result<T, EngineError>
where
    F: FnOnce() -> Result<T, EngineError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| EngineError::Internal(format!("worker failed: {e}")))?
}

async fn create_collection(State(engine): State<Arc<Engine>>, body: Bytes) -> ApiResult {
    let req: CreateCollectionRequest = parse(&body)?;
    let manifest = parse_manifest(&req.manifest)?;
    let report = blocking(move || engine.ingest(&manifest, &req.bodies)).await?;
    Ok((StatusCode::CREATED, Json(report)).into_response())
}

async fn list_collections(State(engine): State<Arc<Engine>>) -> ApiResult {
    Ok(Json(json!({ "collections": engine.list_collections() })).into_response())
}

async fn index_collection(State(engine): State<Arc<Engine>>, Path(id): Path<String>) -> ApiResult {
    let report = blocking(move || engine.index(&id)).await?;
    Ok(Json(report).into_response())
}

async fn create_session(State(engine): State<Arc<Engine>>, body: Bytes) -> ApiResult {
    let req: CreateSessionRequest = parse(&body)?;
    let session = blocking(move || engine.create_session(&req.collection_id)).await?;
    Ok((
        StatusCode::CREATED,
        Json(SessionCreated {
            session_id: session.session_id,
            collection_id: session.collection_id,
        }),
    )
        .into_response())
}

async fn ask(State(engine): State<Arc<Engine>>, Path(id): Path<String>, body: Bytes) -> ApiResult {
    let req: AskRequest = parse(&body)?;
    let response = blocking(move || engine.ask(&id, &req.query)).await?;
    Ok(Json(response).into_response())
}

async fn get_session(State(engine): State<Arc<Engine>>, Path(id): Path<String>) -> ApiResult {
    Ok(Json(engine.session(&id)?).into_response())
}

async fn healthz(State(engine): State<Arc<Engine>>) -> ApiResult {
    Ok(Json(engine.health()).into_response())
}

async fn not_found() -> Response {
    EngineError::NotFound {
        kind: "route",
        id: "requested path".into(),
    }
    .into_response()
}

pub fn router(engine: Arc<Engine>) -> Router {
    let v1 = Router::new()
        .route("/collections", post(create_collection).get(list_collections))
        .route("/collections/{id}/index", post(index_collection))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/ask", post(ask))
        .route("/healthz", get(healthz));
    Router::new().nest("/v1", v1).fallback(not_found).with_state(engine)
}

/// Serves until Ctrl-C.
pub async fn serve(engine: Arc<Engine>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(engine))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
