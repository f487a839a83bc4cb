//! Collection manifest: a small Croissant-style JSON subset.

use std::collections::HashSet;
use std::path::Path;

use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::IngestError;

pub const DEFAULT_MANIFEST_VERSION: &str = "1";
pub const DEFAULT_LANGUAGE: &str = "en";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentMeta {
    pub doc_id: String,
    pub title: String,
    #[serde(default)]
    pub authors: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub publication_date: Option<NaiveDate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_uri: Option<String>,
    pub language: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CollectionManifest {
    pub collection_id: String,
    pub title: String,
    pub documents: Vec<DocumentMeta>,
    pub created_at: Option<DateTime<Utc>>,
    pub manifest_version: String,
}

/// Wire form written by `export-manifest`.
#[derive(Serialize)]
struct ManifestOut<'a> {
    #[serde(rename = "@type")]
    kind: &'static str,
    collection_id: &'a str,
    title: &'a str,
    manifest_version: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    created_at: Option<&'a DateTime<Utc>>,
    documents: &'a [DocumentMeta],
}

impl CollectionManifest {
    pub fn document(&self, doc_id: &str) -> Option<&DocumentMeta> {
        self.documents.iter().find(|d| d.doc_id == doc_id)
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(ManifestOut {
            kind: "sc:Dataset",
            collection_id: &self.collection_id,
            title: &self.title,
            manifest_version: &self.manifest_version,
            created_at: self.created_at.as_ref(),
            documents: &self.documents,
        })
        .expect("manifest serializes")
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(&self.to_json()).expect("manifest serializes")
    }
}

/// Reads and validates a manifest file.
pub fn load_manifest(path: &Path) -> Result<CollectionManifest, IngestError> {
    let raw = std::fs::read_to_string(path).map_err(|e| IngestError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    parse_manifest_str(&raw)
}

pub fn parse_manifest_str(raw: &str) -> Result<CollectionManifest, IngestError> {
    let value: Value = serde_json::from_str(raw).map_err(|e| IngestError::MalformedManifest {
        field: "<document>".into(),
        reason: e.to_string(),
    })?;
    parse_manifest(&value)
}

/// Validates a manifest given as a JSON value. Unknown keys are ignored.
pub fn parse_manifest(value: &Value) -> Result<CollectionManifest, IngestError> {
    let obj = value
        .as_object()
        .ok_or_else(|| malformed("<document>", "expected a JSON object"))?;

    let collection_id = required_str(obj, "collection_id", "collection_id")?;
    check_path_safe_id(&collection_id, "collection_id")?;
    let title = required_str(obj, "title", "title")?;
    let manifest_version = match obj.get("manifest_version") {
        None | Some(Value::Null) => DEFAULT_MANIFEST_VERSION.to_owned(),
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err(malformed("manifest_version", "expected a string")),
    };
    let created_at = match obj.get("created_at") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(
            DateTime::parse_from_rfc3339(s)
                .map_err(|e| malformed("created_at", &format!("not an RFC 3339 timestamp: {e}")))?
                .with_timezone(&Utc),
        ),
        Some(_) => return Err(malformed("created_at", "expected a string")),
    };

    let docs = obj
        .get("documents")
        .ok_or_else(|| malformed("documents", "missing required field"))?
        .as_array()
        .ok_or_else(|| malformed("documents", "expected an array"))?;
    if docs.is_empty() {
        return Err(malformed("documents", "at least one document is required"));
    }

    let mut seen = HashSet::new();
    let mut documents = Vec::with_capacity(docs.len());
    for (i, d) in docs.iter().enumerate() {
        let meta = parse_document(d, i)?;
        if !seen.insert(meta.doc_id.clone()) {
            return Err(IngestError::DuplicateDocId(meta.doc_id));
        }
        documents.push(meta);
    }

    Ok(CollectionManifest {
        collection_id,
        title,
        documents,
        created_at,
        manifest_version,
    })
}

fn parse_document(value: &Value, i: usize) -> Result<DocumentMeta, IngestError> {
    let path = |f: &str| format!("documents[{i}].{f}");
    let obj = value
        .as_object()
        .ok_or_else(|| malformed(&format!("documents[{i}]"), "expected an object"))?;
    let doc_id = required_str(obj, "doc_id", &path("doc_id"))?;
    check_path_safe_id(&doc_id, &path("doc_id"))?;
    let title = required_str(obj, "title", &path("title"))?;

    let authors = match obj.get("authors") {
        None | Some(Value::Null) => Vec::new(),
        Some(Value::Array(items)) => items
            .iter()
            .map(|a| {
                a.as_str()
                    .map(str::to_owned)
                    .ok_or_else(|| malformed(&path("authors"), "expected strings"))
            })
            .collect::<Result<_, _>>()?,
        Some(_) => return Err(malformed(&path("authors"), "expected an array")),
    };

    let publication_date = match optional_str(obj, "publication_date", &path("publication_date"))? {
        None => None,
        Some(s) => Some(NaiveDate::parse_from_str(&s, "%Y-%m-%d").map_err(|_| {
            malformed(&path("publication_date"), "expected an ISO-8601 date (YYYY-MM-DD)")
        })?),
    };
    let source_uri = optional_str(obj, "source_uri", &path("source_uri"))?;
    let language = optional_str(obj, "language", &path("language"))?
        .filter(|l| !l.trim().is_empty())
        .unwrap_or_else(|| DEFAULT_LANGUAGE.to_owned());

    Ok(DocumentMeta {
        doc_id,
        title,
        authors,
        publication_date,
        source_uri,
        language,
    })
}

fn malformed(field: &str, reason: &str) -> IngestError {
    IngestError::MalformedManifest {
        field: field.to_owned(),
        reason: reason.to_owned(),
    }
}

fn required_str(obj: &Map<String, Value>, key: &str, path: &str) -> Result<String, IngestError> {
    match obj.get(key) {
        None | Some(Value::Null) => Err(malformed(path, "missing required field")),
        Some(Value::String(s)) if s.trim().is_empty() => Err(malformed(path, "must not be empty")),
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(malformed(path, "expected a string")),
    }
}

fn optional_str(
    obj: &Map<String, Value>,
    key: &str,
    path: &str,
) -> Result<Option<String>, IngestError> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(_) => Err(malformed(path, "expected a string")),
    }
}

/// Ids double as file and directory names.
fn check_path_safe_id(id: &str, path: &str) -> Result<(), IngestError> {
    if id == "." || id == ".." || id.chars().any(|c| c == '/' || c == '\\' || c.is_control()) {
        return Err(malformed(path, "must not contain path separators or control characters"));
    }
    Ok(())
}
