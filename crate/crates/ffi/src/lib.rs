//! C ABI over `gw-core`.
//!
//! An engine is an opaque `GwEngine*`. Every fallible call returns a
//! `GwStatus`; on failure the message is available from
//! `gw_last_error_message` on the same thread. Strings handed out through
//! `char **out` parameters are owned by the caller and released with
//! `gw_string_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use gw_core::embedding::{dot, HashingEmbedder};
use gw_core::ingest::parse_manifest;
use gw_core::service::{Engine, EngineError, ServiceConfig};
use serde_json::Value;

/// Dimension of the default hashing embedder.
pub const GW_DEFAULT_DIMENSION: usize = 256;
/// Seed of the default hashing embedder.
pub const GW_DEFAULT_SEED: u64 = 0x6777_2d65_6d62_6564;

/// Opaque engine handle.
pub struct GwEngine {
    inner: Engine,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GwStatus {
    Ok = 0,
    InvalidArgument = 1,
    NotFound = 2,
    NotIndexed = 3,
    EmptyQuery = 4,
    Provider = 5,
    Busy = 6,
    Io = 7,
    Internal = 8,
}

impl From<&EngineError> for GwStatus {
    fn from(e: &EngineError) -> Self {
        match e {
            EngineError::NotFound { .. } => GwStatus::NotFound,
            EngineError::NotIndexed(_) => GwStatus::NotIndexed,
            EngineError::EmptyQuery => GwStatus::EmptyQuery,
            EngineError::InvalidRequest(_) => GwStatus::InvalidArgument,
            EngineError::Provider { .. } => GwStatus::Provider,
            EngineError::Busy(_) => GwStatus::Busy,
            EngineError::Io(_) => GwStatus::Io,
            EngineError::Internal(_) => GwStatus::Internal,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = CString::new(msg).ok());
}

fn clear_last_error() {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
}

struct Failure(GwStatus, String);

impl From<EngineError> for Failure {
    fn from(e: EngineError) -> Self {
        Failure(GwStatus::from(&e), e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(GwStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> GwStatus {
    clear_last_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GwStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(_) => {
            set_last_error("panic inside gw");
            GwStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(invalid(format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{name} is not valid UTF-8")))
}

unsafe fn engine_arg<'a>(p: *const GwEngine) -> Result<&'a Engine, Failure> {
    p.as_ref().map(|e| &e.inner).ok_or_else(|| invalid("engine is null"))
}

unsafe fn write_string(out: *mut *mut c_char, s: String) -> Result<(), Failure> {
    if out.is_null() {
        return Err(invalid("output pointer is null"));
    }
    let c = CString::new(s).map_err(|_| Failure(GwStatus::Internal, "output contains NUL".into()))?;
    *out = c.into_raw();
    Ok(())
}

unsafe fn write_json<T: serde::Serialize>(out: *mut *mut c_char, value: &T) -> Result<(), Failure> {
    let s = serde_json::to_string(value).map_err(|e| Failure(GwStatus::Internal, e.to_string()))?;
    write_string(out, s)
}

/// Opens an engine. `config_toml` is the text of a TOML configuration and
/// may be null for defaults. On success `*out` receives the handle.
///
/// # Safety
/// `config_toml` must be null or a NUL-terminated string; `out` must be a
/// valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gw_engine_open(config_toml: *const c_char, out: *mut *mut GwEngine) -> GwStatus {
    guard(|| {
        if out.is_null() {
            return Err(invalid("output pointer is null"));
        }
        *out = ptr::null_mut();
        let config = if config_toml.is_null() {
            ServiceConfig::default()
        } else {
            ServiceConfig::from_toml_str(str_arg(config_toml, "config_toml")?)?
        };
        config.validate()?;
        let engine = Engine::open(config)?;
        *out = Box::into_raw(Box::new(GwEngine { inner: engine }));
        Ok(())
    })
}

/// Releases an engine. Null is ignored.
///
/// # Safety
/// `engine` must be null or a handle from `gw_engine_open` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gw_engine_free(engine: *mut GwEngine) {
    if !engine.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(Box::from_raw(engine))));
    }
}

/// Ingests a collection. `request_json` is `{"manifest": {...}, "bodies":
/// {"doc_id": "text", ...}}`; `*out_json` receives the ingest report.
///
/// # Safety
/// Pointers must be valid; strings NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn gw_ingest(
    engine: *const GwEngine,
    request_json: *const c_char,
    out_json: *mut *mut c_char,
) -> GwStatus {
    guard(|| {
        let engine = engine_arg(engine)?;
        let request: Value = serde_json::from_str(str_arg(request_json, "request_json")?)
            .map_err(|e| invalid(format!("request_json: {e}")))?;
        let manifest = request.get("manifest").ok_or_else(|| invalid("request_json: missing `manifest`"))?;
        let manifest = parse_manifest(manifest).map_err(EngineError::from)?;
        let mut bodies = std::collections::BTreeMap::new();
        if let Some(map) = request.get("bodies") {
            let map = map.as_object().ok_or_else(|| invalid("request_json: `bodies` must be an object"))?;
            for (id, text) in map {
                let text = text
                    .as_str()
                    .ok_or_else(|| invalid(format!("request_json: body `{id}` must be a string")))?;
                bodies.insert(id.clone(), text.to_string());
            }
        }
        let report = engine.ingest(&manifest, &bodies)?;
        write_json(out_json, &report)
    })
}

/// Builds the index for a collection; `*out_json` receives the report.
///
/// # Safety
/// Pointers must be valid; strings NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn gw_index(
    engine: *const GwEngine,
    collection_id: *const c_char,
    out_json: *mut *mut c_char,
) -> GwStatus {
    guard(|| {
        let engine = engine_arg(engine)?;
        let report = engine.index(str_arg(collection_id, "collection_id")?)?;
        write_json(out_json, &report)
    })
}

/// Starts a session; `*out_session_id` receives its id.
///
/// # Safety
/// Pointers must be valid; strings NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn gw_session_create(
    engine: *const GwEngine,
    collection_id: *const c_char,
    out_session_id: *mut *mut c_char,
) -> GwStatus {
    guard(|| {
        let engine = engine_arg(engine)?;
        let session = engine.create_session(str_arg(collection_id, "collection_id")?)?;
        write_string(out_session_id, session.session_id)
    })
}

/// Asks a question within a session; `*out_json` receives the answer with
/// citations and probes.
///
/// # Safety
/// Pointers must be valid; strings NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn gw_ask(
    engine: *const GwEngine,
    session_id: *const c_char,
    query: *const c_char,
    out_json: *mut *mut c_char,
) -> GwStatus {
    guard(|| {
        let engine = engine_arg(engine)?;
        let response = engine.ask(str_arg(session_id, "session_id")?, str_arg(query, "query")?)?;
        write_json(out_json, &response)
    })
}

/// `*out_json` receives the session with its turns.
///
/// # Safety
/// Pointers must be valid; strings NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn gw_session_history(
    engine: *const GwEngine,
    session_id: *const c_char,
    out_json: *mut *mut c_char,
) -> GwStatus {
    guard(|| {
        let engine = engine_arg(engine)?;
        let session = engine.session(str_arg(session_id, "session_id")?)?;
        write_json(out_json, &session)
    })
}

/// Writes the unit-norm hashing embedding of `text` into `out[0..dimension]`.
/// Returns `GW_STATUS_EMPTY_QUERY` when the text has no indexable tokens.
///
/// # Safety
/// `text` must be NUL-terminated; `out` must hold `dimension` doubles.
#[no_mangle]
pub unsafe extern "C" fn gw_hashing_embed(
    text: *const c_char,
    dimension: usize,
    seed: u64,
    out: *mut f64,
) -> GwStatus {
    guard(|| {
        let text = str_arg(text, "text")?;
        if dimension == 0 {
            return Err(invalid("dimension must be positive"));
        }
        if out.is_null() {
            return Err(invalid("output pointer is null"));
        }
        let v = HashingEmbedder::new(dimension, seed)
            .embed_text(text)
            .ok_or(Failure(GwStatus::EmptyQuery, "text has no indexable tokens".into()))?;
        ptr::copy_nonoverlapping(v.values.as_ptr(), out, dimension);
        Ok(())
    })
}

/// Cosine similarity of two unit vectors of length `len`, clamped to
/// [-1, 1].
///
/// # Safety
/// `a` and `b` must hold `len` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn gw_cosine(a: *const f64, b: *const f64, len: usize, out: *mut f64) -> GwStatus {
    guard(|| {
        if a.is_null() || b.is_null() || out.is_null() {
            return Err(invalid("null pointer"));
        }
        let (a, b) = (std::slice::from_raw_parts(a, len), std::slice::from_raw_parts(b, len));
        let s = dot(a, b);
        if !s.is_finite() {
            return Err(invalid("vectors contain non-finite values"));
        }
        *out = s.clamp(-1.0, 1.0);
        Ok(())
    })
}

/// Message of the last failed call on this thread, or null. Valid until
/// the next gw call on the same thread.
#[no_mangle]
pub extern "C" fn gw_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Frees a string returned through an `out` parameter. Null is ignored.
///
/// # Safety
/// `s` must be null or a string returned by this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn gw_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Library version, static storage.
#[no_mangle]
pub extern "C" fn gw_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
