//! Collection ingestion: manifest loading, paragraph splitting and the
//! on-disk fragment store.

mod manifest;
mod split;
mod store;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use manifest::{
    load_manifest, parse_manifest, parse_manifest_str, CollectionManifest, DocumentMeta,
    DEFAULT_LANGUAGE, DEFAULT_MANIFEST_VERSION,
};
pub use split::{fragment_id, split_document, split_spans, SplitPolicy};
pub use store::{
    build_fragment_store, ingest_collection, FragmentStore, IngestReport, SkippedDocument,
    FRAGMENT_STORE_FORMAT, FRAGMENT_STORE_VERSION,
};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("malformed manifest: field `{field}`: {reason}")]
    MalformedManifest { field: String, reason: String },
    #[error("duplicate doc_id `{0}` in manifest")]
    DuplicateDocId(String),
    #[error("document `{0}` is empty after normalization")]
    EmptyDocument(String),
    #[error("invalid split policy {0:?}")]
    InvalidPolicy(SplitPolicy),
    #[error("failed to write fragment store `{path}`: {source}")]
    StoreWriteError {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed fragment store `{path}`: {reason}")]
    MalformedStore { path: String, reason: String },
    #[error("i/o error on `{path}`: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub meta: DocumentMeta,
    pub body: String,
}

/// One paragraph-level chunk of a document; the retrieval unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fragment {
    pub fragment_id: String,
    pub doc_id: String,
    pub ordinal: usize,
    pub text: String,
    /// Byte offsets into the normalized body.
    pub char_span: (usize, usize),
}

/// Reads `{doc_id}.txt` for every manifest document present in `dir`.
/// Missing files are simply absent from the map and get reported as skipped
/// at ingestion.
pub fn load_bodies(
    dir: &Path,
    manifest: &CollectionManifest,
) -> Result<BTreeMap<String, String>, IngestError> {
    let mut bodies = BTreeMap::new();
    for doc in &manifest.documents {
        let path = dir.join(format!("{}.txt", doc.doc_id));
        match std::fs::read_to_string(&path) {
            Ok(text) => {
                bodies.insert(doc.doc_id.clone(), text);
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => {
                return Err(IngestError::Io {
                    path: path.display().to_string(),
                    source: e,
                })
            }
        }
    }
    Ok(bodies)
}

/// Hook for an external PDF-to-text converter. Binary parsing is not done
/// in-process; implementations shell out or call a service and hand back
/// plain text for the regular ingestion path.
pub trait TextExtractor: Send + Sync {
    fn extract_text(&self, path: &Path) -> Result<String, IngestError>;
}

/// Runs `program args... <path>` and takes its stdout as the document text.
#[derive(Debug, Clone)]
pub struct CommandTextExtractor {
    pub program: String,
    pub args: Vec<String>,
}

impl TextExtractor for CommandTextExtractor {
    fn extract_text(&self, path: &Path) -> Result<String, IngestError> {
        let io_err = |e| IngestError::Io {
            path: path.display().to_string(),
            source: e,
        };
        let out = std::process::Command::new(&self.program)
            .args(&self.args)
            .arg(path)
            .output()
            .map_err(io_err)?;
        if !out.status.success() {
            return Err(io_err(std::io::Error::other(format!(
                "`{}` exited with {}",
                self.program, out.status
            ))));
        }
        String::from_utf8(out.stdout)
            .map_err(|e| io_err(std::io::Error::new(std::io::ErrorKind::InvalidData, e)))
    }
}
