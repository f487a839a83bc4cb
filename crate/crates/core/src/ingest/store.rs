//! JSON-lines fragment store: one header record with the collection metadata,
//! then one record per fragment in (manifest document order, ordinal) order.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader};
use std::path::Path;

use chrono::{DateTime, Utc};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{split_document, CollectionManifest, Document, DocumentMeta, Fragment, IngestError, SplitPolicy};
use crate::fsutil::write_atomic;

pub const FRAGMENT_STORE_FORMAT: &str = "gw-fragments";
pub const FRAGMENT_STORE_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoreHeader {
    format: String,
    version: u32,
    collection_id: String,
    title: String,
    manifest_version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    created_at: Option<DateTime<Utc>>,
    documents: Vec<DocumentMeta>,
    fragment_count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Record {
    Header(StoreHeader),
    Fragment(Fragment),
}

/// All fragments of one collection plus the metadata of the documents they
/// came from.
#[derive(Debug, Clone, PartialEq)]
pub struct FragmentStore {
    pub collection_id: String,
    pub title: String,
    pub manifest_version: String,
    pub created_at: Option<DateTime<Utc>>,
    pub documents: Vec<DocumentMeta>,
    pub fragments: Vec<Fragment>,
    by_id: HashMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedDocument {
    pub doc_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub collection_id: String,
    pub documents: usize,
    pub fragments: usize,
    pub skipped: Vec<SkippedDocument>,
}

impl FragmentStore {
    pub fn new(
        manifest: &CollectionManifest,
        documents: Vec<DocumentMeta>,
        fragments: Vec<Fragment>,
    ) -> Self {
        let by_id = index_ids(&fragments);
        Self {
            collection_id: manifest.collection_id.clone(),
            title: manifest.title.clone(),
            manifest_version: manifest.manifest_version.clone(),
            created_at: manifest.created_at,
            documents,
            fragments,
            by_id,
        }
    }

    pub fn fragment(&self, fragment_id: &str) -> Option<&Fragment> {
        self.by_id.get(fragment_id).map(|&i| &self.fragments[i])
    }

    pub fn document(&self, doc_id: &str) -> Option<&DocumentMeta> {
        self.documents.iter().find(|d| d.doc_id == doc_id)
    }

    pub fn document_map(&self) -> BTreeMap<String, DocumentMeta> {
        self.documents
            .iter()
            .map(|d| (d.doc_id.clone(), d.clone()))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.fragments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fragments.is_empty()
    }

    pub fn to_jsonl(&self) -> String {
        let header = Record::Header(StoreHeader {
            format: FRAGMENT_STORE_FORMAT.into(),
            version: FRAGMENT_STORE_VERSION,
            collection_id: self.collection_id.clone(),
            title: self.title.clone(),
            manifest_version: self.manifest_version.clone(),
            created_at: self.created_at,
            documents: self.documents.clone(),
            fragment_count: self.fragments.len(),
        });
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for f in &self.fragments {
            out.push_str(&serde_json::to_string(&Record::Fragment(f.clone())).expect("fragment serializes"));
            out.push('\n');
        }
        out
    }

    pub fn persist(&self, path: &Path) -> Result<(), IngestError> {
        write_atomic(path, self.to_jsonl().as_bytes()).map_err(|e| IngestError::StoreWriteError {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<Self, IngestError> {
        let shown = path.display().to_string();
        let file = std::fs::File::open(path).map_err(|e| IngestError::Io {
            path: shown.clone(),
            source: e,
        })?;
        let bad = |reason: String| IngestError::MalformedStore {
            path: shown.clone(),
            reason,
        };
        let mut header: Option<StoreHeader> = None;
        let mut fragments = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| IngestError::Io {
                path: shown.clone(),
                source: e,
            })?;
            if line.is_empty() {
                continue;
            }
            let record: Record =
                serde_json::from_str(&line).map_err(|e| bad(format!("line {}: {e}", n + 1)))?;
            match (record, &header) {
                (Record::Header(h), None) if n == 0 => header = Some(h),
                (Record::Header(_), _) => return Err(bad(format!("line {}: unexpected header", n + 1))),
                (Record::Fragment(_), None) => return Err(bad("missing header record".into())),
                (Record::Fragment(f), Some(_)) => fragments.push(f),
            }
        }
        let header = header.ok_or_else(|| bad("empty store".into()))?;
        if header.format != FRAGMENT_STORE_FORMAT || header.version != FRAGMENT_STORE_VERSION {
            return Err(bad(format!(
                "unsupported format {} v{}",
                header.format, header.version
            )));
        }
        if header.fragment_count != fragments.len() {
            return Err(bad(format!(
                "header declares {} fragments, found {}",
                header.fragment_count,
                fragments.len()
            )));
        }
        let by_id = index_ids(&fragments);
        Ok(Self {
            collection_id: header.collection_id,
            title: header.title,
            manifest_version: header.manifest_version,
            created_at: header.created_at,
            documents: header.documents,
            fragments,
            by_id,
        })
    }
}

fn index_ids(fragments: &[Fragment]) -> HashMap<String, usize> {
    fragments
        .iter()
        .enumerate()
        .map(|(i, f)| (f.fragment_id.clone(), i))
        .collect()
}

/// Splits every manifest document that has a body. Documents without a body
/// or with an empty body are reported as skipped; the batch never aborts on
/// a per-document failure.
pub fn build_fragment_store(
    manifest: &CollectionManifest,
    bodies: &BTreeMap<String, String>,
    policy: &SplitPolicy,
) -> Result<(FragmentStore, IngestReport), IngestError> {
    policy.validate()?;
    let results: Vec<Result<Vec<Fragment>, SkippedDocument>> = manifest
        .documents
        .par_iter()
        .map(|meta| {
            let Some(body) = bodies.get(&meta.doc_id) else {
                return Err(SkippedDocument {
                    doc_id: meta.doc_id.clone(),
                    reason: "missing body".into(),
                });
            };
            let doc = Document {
                meta: meta.clone(),
                body: body.clone(),
            };
            split_document(&doc, policy).map_err(|e| SkippedDocument {
                doc_id: meta.doc_id.clone(),
                reason: e.to_string(),
            })
        })
        .collect();

    let mut documents = Vec::new();
    let mut fragments = Vec::new();
    let mut skipped = Vec::new();
    for (meta, result) in manifest.documents.iter().zip(results) {
        match result {
            Ok(frags) => {
                documents.push(meta.clone());
                fragments.extend(frags);
            }
            Err(s) => skipped.push(s),
        }
    }
    let report = IngestReport {
        collection_id: manifest.collection_id.clone(),
        documents: documents.len(),
        fragments: fragments.len(),
        skipped,
    };
    Ok((FragmentStore::new(manifest, documents, fragments), report))
}

/// Builds the fragment store and atomically replaces `store_path` with it.
/// Re-ingesting a collection therefore replaces, never duplicates.
pub fn ingest_collection(
    manifest: &CollectionManifest,
    bodies: &BTreeMap<String, String>,
    policy: &SplitPolicy,
    store_path: &Path,
) -> Result<(FragmentStore, IngestReport), IngestError> {
    let (store, report) = build_fragment_store(manifest, bodies, policy)?;
    store.persist(store_path)?;
    Ok((store, report))
}
