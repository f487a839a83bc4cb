//! SPARQL-over-HTTP knowledge graph client with a replayable response cache.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::{is_iri, KgClient, KgConcept, KgError, RelatedConcept, RelationKind};
use crate::fsutil::append_line;
use crate::provider::{Backoff, HttpRequest, Transport};

pub const SKOS_NS: &str = "http://www.w3.org/2004/02/skos/core#";
const RDFS_LABEL: &str = "http://www.w3.org/2000/01/rdf-schema#label";

#[derive(Debug, Serialize, Deserialize)]
struct CacheLine {
    request_hash: String,
    response: Value,
    fetched_at: DateTime<Utc>,
}

/// `(endpoint, query)`-keyed response cache persisted as JSON lines.
/// Readers share the in-memory map; appends are serialized.
pub struct ResponseCache {
    path: Option<PathBuf>,
    entries: RwLock<HashMap<String, Value>>,
    append: Mutex<()>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        Self {
            path: None,
            entries: RwLock::new(HashMap::new()),
            append: Mutex::new(()),
        }
    }

    /// Opens (or starts) a cache file. Later lines win over earlier ones.
    pub fn open(path: &Path) -> Result<Self, KgError> {
        let io = |e| KgError::Io {
            path: path.display().to_string(),
            source: e,
        };
        let mut entries = HashMap::new();
        match std::fs::File::open(path) {
            Ok(f) => {
                for line in BufReader::new(f).lines() {
                    let line = line.map_err(io)?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    // A torn last line from an interrupted append is skipped.
                    if let Ok(entry) = serde_json::from_str::<CacheLine>(&line) {
                        entries.insert(entry.request_hash, entry.response);
                    }
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(io(e)),
        }
        Ok(Self {
            path: Some(path.to_owned()),
            entries: RwLock::new(entries),
            append: Mutex::new(()),
        })
    }

    pub fn key(endpoint: &str, query: &str) -> String {
        let mut h = Sha256::new();
        h.update(endpoint.as_bytes());
        h.update(b"\n");
        h.update(query.as_bytes());
        hex::encode(h.finalize())
    }

    pub fn get(&self, key: &str) -> Option<Value> {
        self.entries.read().get(key).cloned()
    }

    pub fn put(&self, key: &str, response: &Value) -> Result<(), KgError> {
        let _guard = self.append.lock();
        if let Some(path) = &self.path {
            let line = serde_json::to_string(&CacheLine {
                request_hash: key.to_owned(),
                response: response.clone(),
                fetched_at: Utc::now(),
            })
            .expect("cache line serializes");
            append_line(path, &line).map_err(|e| KgError::Io {
                path: path.display().to_string(),
                source: e,
            })?;
        }
        self.entries.write().insert(key.to_owned(), response.clone());
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.read().is_empty()
    }
}

/// Client for a SPARQL endpoint exposing SKOS (or Wikidata-style) data.
pub struct SparqlKgClient {
    pub endpoint: String,
    pub token: Option<String>,
    pub transport: Arc<dyn Transport>,
    pub cache: ResponseCache,
    /// Extra predicate IRIs treated as "related" links.
    pub extra_relations: Vec<String>,
    pub candidate_limit: usize,
    pub backoff: Backoff,
}

#[derive(Debug, Deserialize)]
struct Term {
    #[serde(rename = "type")]
    kind: String,
    value: String,
    #[serde(rename = "xml:lang", default)]
    lang: Option<String>,
}

impl SparqlKgClient {
    pub fn new(endpoint: impl Into<String>, transport: Arc<dyn Transport>, cache: ResponseCache) -> Self {
        Self {
            endpoint: endpoint.into(),
            token: None,
            transport,
            cache,
            extra_relations: Vec::new(),
            candidate_limit: 25,
            backoff: Backoff::default(),
        }
    }

    fn unavailable(&self, message: impl Into<String>) -> KgError {
        KgError::KgUnavailable {
            source_id: self.endpoint.clone(),
            message: message.into(),
        }
    }

    /// Runs a SELECT query, consulting the cache first.
    fn select(&self, query: &str) -> Result<Vec<HashMap<String, Term>>, KgError> {
        let key = ResponseCache::key(&self.endpoint, query);
        let response = match self.cache.get(&key) {
            Some(v) => v,
            None => {
                let request = HttpRequest::get(&self.endpoint)
                    .query("query", query)
                    .header("Accept", "application/sparql-results+json")
                    .bearer(self.token.as_deref());
                let v = self
                    .backoff
                    .run(|| self.transport.send(&request))
                    .map_err(|e| self.unavailable(e.to_string()))?;
                self.cache.put(&key, &v)?;
                v
            }
        };
        let bindings = response
            .pointer("/results/bindings")
            .cloned()
            .ok_or_else(|| self.unavailable("response has no results.bindings"))?;
        serde_json::from_value(bindings).map_err(|e| self.unavailable(format!("bad bindings: {e}")))
    }

    fn candidates_query(&self, surface: &str) -> String {
        format!(
            "PREFIX skos: <{SKOS_NS}>\n\
             PREFIX rdfs: <http://www.w3.org/2000/01/rdf-schema#>\n\
             SELECT DISTINCT ?concept WHERE {{\n  \
               {{ ?concept skos:prefLabel ?label }} UNION {{ ?concept skos:altLabel ?label }} UNION {{ ?concept rdfs:label ?label }}\n  \
               FILTER(CONTAINS(LCASE(STR(?label)), {}))\n\
             }}\nORDER BY ?concept\nLIMIT {}",
            sparql_string(&surface.to_lowercase()),
            self.candidate_limit
        )
    }

    fn concept_query(&self, iri: &str) -> String {
        let mut predicates = vec![
            format!("<{SKOS_NS}prefLabel>"),
            format!("<{SKOS_NS}altLabel>"),
            format!("<{RDFS_LABEL}>"),
            format!("<{SKOS_NS}related>"),
            format!("<{SKOS_NS}broader>"),
        ];
        predicates.extend(self.extra_relations.iter().map(|p| format!("<{p}>")));
        format!(
            "SELECT ?p ?o WHERE {{\n  <{iri}> ?p ?o .\n  FILTER(?p IN ({}))\n}}",
            predicates.join(", ")
        )
    }
}

/// Quoted SPARQL string literal.
fn sparql_string(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

fn safe_iri(iri: &str) -> bool {
    is_iri(iri) && !iri.contains(['<', '>', '"', '{', '}', '|', '^', '`', '\\'])
}

impl KgClient for SparqlKgClient {
    fn source_id(&self) -> &str {
        &self.endpoint
    }

    fn find_candidates(&self, surface: &str) -> Result<Vec<KgConcept>, KgError> {
        if surface.trim().is_empty() {
            return Ok(Vec::new());
        }
        let rows = self.select(&self.candidates_query(surface))?;
        let iris: BTreeSet<String> = rows
            .into_iter()
            .filter_map(|mut r| r.remove("concept"))
            .filter(|t| t.kind == "uri")
            .map(|t| t.value)
            .collect();
        let mut out = Vec::new();
        for iri in iris {
            if let Some(c) = self.concept(&iri)? {
                out.push(c);
            }
        }
        Ok(out)
    }

    fn concept(&self, iri: &str) -> Result<Option<KgConcept>, KgError> {
        if !safe_iri(iri) {
            return Ok(None);
        }
        let rows = self.select(&self.concept_query(iri))?;
        let mut pref: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        let mut rdfs: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        let mut alt: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        let mut related: BTreeSet<(RelationKind, String)> = BTreeSet::new();
        for mut row in rows {
            let (Some(p), Some(o)) = (row.remove("p"), row.remove("o")) else {
                continue;
            };
            let lang = o.lang.clone().unwrap_or_else(|| "und".into());
            let is_literal = o.kind == "literal" || o.kind == "typed-literal";
            match p.value.as_str() {
                v if v == format!("{SKOS_NS}prefLabel") && is_literal => {
                    pref.entry(lang).or_default().insert(o.value);
                }
                v if v == format!("{SKOS_NS}altLabel") && is_literal => {
                    alt.entry(lang).or_default().insert(o.value);
                }
                RDFS_LABEL if is_literal => {
                    rdfs.entry(lang).or_default().insert(o.value);
                }
                v if o.kind == "uri" && o.value != iri => {
                    let kind = if v == format!("{SKOS_NS}related") {
                        RelationKind::Related
                    } else if v == format!("{SKOS_NS}broader") {
                        RelationKind::Broader
                    } else {
                        RelationKind::Other(v.to_owned())
                    };
                    related.insert((kind, o.value));
                }
                _ => {}
            }
        }
        // rdfs:label stands in for a missing skos:prefLabel in that language.
        for (lang, labels) in rdfs {
            let slot = pref.entry(lang.clone()).or_default();
            if slot.is_empty() {
                slot.extend(labels);
            } else {
                alt.entry(lang).or_default().extend(labels);
            }
        }
        let mut pref_labels = BTreeMap::new();
        for (lang, mut labels) in pref {
            let Some(first) = labels.pop_first() else { continue };
            alt.entry(lang.clone()).or_default().extend(labels);
            pref_labels.insert(lang, first);
        }
        if pref_labels.is_empty() {
            return Ok(None);
        }
        let alt_labels = alt
            .into_iter()
            .map(|(lang, ls)| {
                let prefs = &pref_labels;
                let kept: Vec<String> = ls.into_iter().filter(|l| prefs.get(&lang) != Some(l)).collect();
                (lang, kept)
            })
            .filter(|(_, v)| !v.is_empty())
            .collect();
        let mut seen = BTreeSet::new();
        let related = related
            .into_iter()
            .filter(|(_, i)| seen.insert(i.clone()))
            .map(|(relation, iri)| RelatedConcept { iri, relation })
            .collect();
        let concept = KgConcept {
            concept_iri: iri.to_owned(),
            pref_labels,
            alt_labels,
            related,
            source_graph: self.endpoint.clone(),
        };
        concept
            .validate()
            .map_err(|m| self.unavailable(format!("endpoint returned an invalid concept: {m}")))?;
        Ok(Some(concept))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::link_term;
    use crate::provider::testing::ScriptedTransport;
    use crate::provider::TransportError;
    use crate::terms::Term as QueryTerm;
    use serde_json::json;

    fn bindings(rows: Value) -> Value {
        json!({"head": {"vars": []}, "results": {"bindings": rows}})
    }

    fn concept_reply() -> Value {
        bindings(json!([
            {"p": {"type": "uri", "value": format!("{SKOS_NS}prefLabel")},
             "o": {"type": "literal", "value": "male breadwinner model", "xml:lang": "en"}},
            {"p": {"type": "uri", "value": format!("{SKOS_NS}altLabel")},
             "o": {"type": "literal", "value": "Ernährermodell", "xml:lang": "de"}},
            {"p": {"type": "uri", "value": RDFS_LABEL},
             "o": {"type": "literal", "value": "männliches Ernährermodell", "xml:lang": "de"}},
            {"p": {"type": "uri", "value": format!("{SKOS_NS}related")},
             "o": {"type": "uri", "value": "http://www.wikidata.org/entity/Q2"}},
            {"p": {"type": "uri", "value": "http://www.wikidata.org/prop/direct/P279"},
             "o": {"type": "uri", "value": "http://www.wikidata.org/entity/Q3"}}
        ]))
    }

    fn client(transport: Arc<ScriptedTransport>, cache: ResponseCache) -> SparqlKgClient {
        let mut c = SparqlKgClient::new("https://query.example.org/sparql", transport, cache);
        c.extra_relations = vec!["http://www.wikidata.org/prop/direct/P279".into()];
        c.backoff = Backoff::none();
        c.token = Some("tok".into());
        c
    }

    #[test]
    fn links_through_endpoint_and_caches() {
        let dir = tempfile::tempdir().unwrap();
        let cache_path = dir.path().join("kg-cache.jsonl");
        let transport = Arc::new(ScriptedTransport::new(vec![
            Ok(bindings(json!([{"concept": {"type": "uri", "value": "http://www.wikidata.org/entity/Q1"}}]))),
            Ok(concept_reply()),
        ]));
        let kg = client(transport.clone(), ResponseCache::open(&cache_path).unwrap());
        let term = QueryTerm {
            surface: "male breadwinner model".into(),
            weight: 0.3,
            source_fragments: vec!["query".into()],
        };
        let linked = link_term(&term, &kg).unwrap();
        let concept = linked.concept.as_ref().unwrap();
        assert_eq!(concept.concept_iri, "http://www.wikidata.org/entity/Q1");
        assert_eq!(concept.pref_labels["de"], "männliches Ernährermodell");
        assert_eq!(concept.related.len(), 2);
        assert!(concept
            .related
            .iter()
            .any(|r| matches!(&r.relation, RelationKind::Other(p) if p.ends_with("P279"))));
        assert!(linked.expansion_labels.iter().any(|l| l.label == "Ernährermodell"));

        {
            let seen = transport.seen.lock();
            assert_eq!(seen.len(), 2);
            assert!(seen[0].query[0].1.contains("CONTAINS(LCASE(STR(?label)), \"male breadwinner model\")"));
            assert!(seen[1].query[0].1.contains("<http://www.wikidata.org/entity/Q1> ?p ?o"));
            assert!(seen[0].headers.iter().any(|(k, v)| k == "Authorization" && v == "Bearer tok"));
        }

        // Second run is served from the cache file without the network.
        let offline = Arc::new(ScriptedTransport::new(vec![]));
        let kg2 = client(offline.clone(), ResponseCache::open(&cache_path).unwrap());
        assert_eq!(kg2.cache.len(), 2);
        let again = link_term(&term, &kg2).unwrap();
        assert_eq!(again, linked);
        assert!(offline.seen.lock().is_empty());
    }

    #[test]
    fn outage_is_distinct_from_no_match() {
        let transport = Arc::new(ScriptedTransport::new(vec![
            Err(TransportError::Status { code: 503 }),
            Ok(bindings(json!([]))),
        ]));
        let kg = client(transport, ResponseCache::in_memory());
        assert!(matches!(
            kg.find_candidates("anything"),
            Err(KgError::KgUnavailable { .. })
        ));
        assert!(kg.find_candidates("anything").unwrap().is_empty());
    }

    #[test]
    fn literal_escaping() {
        assert_eq!(sparql_string("a \"b\"\\"), "\"a \\\"b\\\"\\\\\"");
        assert!(!safe_iri("http://x.org/a> } DROP"));
    }
}
