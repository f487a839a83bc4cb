//! Offline knowledge graph loaded from a SKOS-subset JSON fixture:
//!
//! ```json
//! {"format": "gw-skos", "version": 1, "source": "kos-mini",
//!  "concepts": [{"iri": "...", "prefLabel": {"en": "..."},
//!                "altLabel": {"de": ["..."]}, "related": ["..."], "broader": ["..."]}]}
//! ```

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::Deserialize;
use serde_json::Value;

use super::{KgClient, KgConcept, KgError, RelatedConcept, RelationKind};
use crate::text::tokenize;

pub const SKOS_FIXTURE_FORMAT: &str = "gw-skos";

#[derive(Deserialize)]
struct FixtureFile {
    #[serde(default)]
    format: Option<String>,
    #[serde(default)]
    version: Option<u32>,
    #[serde(default)]
    source: Option<String>,
    concepts: Vec<FixtureConcept>,
}

#[derive(Deserialize)]
struct FixtureConcept {
    iri: String,
    #[serde(rename = "prefLabel", default)]
    pref_label: BTreeMap<String, String>,
    #[serde(rename = "altLabel", default)]
    alt_label: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    related: Vec<String>,
    #[serde(default)]
    broader: Vec<String>,
}

/// In-memory graph with a token index over all labels.
#[derive(Debug, Clone)]
pub struct FixtureKg {
    source_id: String,
    concepts: BTreeMap<String, KgConcept>,
    label_tokens: Vec<(String, Vec<String>)>,
}

impl FixtureKg {
    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn concepts(&self) -> impl Iterator<Item = &KgConcept> {
        self.concepts.values()
    }
}

pub fn load_skos_fixture(path: &Path) -> Result<FixtureKg, KgError> {
    let raw = std::fs::read_to_string(path).map_err(|e| KgError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let value: Value =
        serde_json::from_str(&raw).map_err(|e| KgError::MalformedFixture(e.to_string()))?;
    parse_skos_fixture(&value)
}

pub fn parse_skos_fixture(value: &Value) -> Result<FixtureKg, KgError> {
    let file: FixtureFile = serde_json::from_value(value.clone())
        .map_err(|e| KgError::MalformedFixture(e.to_string()))?;
    if let Some(format) = &file.format {
        if format != SKOS_FIXTURE_FORMAT {
            return Err(KgError::MalformedFixture(format!("unknown format `{format}`")));
        }
    }
    if file.version.is_some_and(|v| v != 1) {
        return Err(KgError::MalformedFixture(format!(
            "unsupported version {}",
            file.version.unwrap()
        )));
    }
    let source_id = file.source.unwrap_or_else(|| "fixture".into());

    let known: HashSet<&str> = file.concepts.iter().map(|c| c.iri.as_str()).collect();
    if known.len() != file.concepts.len() {
        let mut seen = HashSet::new();
        let dup = file.concepts.iter().find(|c| !seen.insert(&c.iri)).unwrap();
        return Err(KgError::MalformedFixture(format!("duplicate concept `{}`", dup.iri)));
    }

    let mut concepts = BTreeMap::new();
    for c in &file.concepts {
        let mut related = Vec::new();
        let mut seen = HashSet::new();
        let links = c
            .related
            .iter()
            .map(|i| (i, RelationKind::Related))
            .chain(c.broader.iter().map(|i| (i, RelationKind::Broader)));
        for (iri, relation) in links {
            if !known.contains(iri.as_str()) {
                return Err(KgError::MalformedFixture(format!(
                    "concept `{}` references unknown concept `{iri}`",
                    c.iri
                )));
            }
            if iri == &c.iri || !seen.insert(iri) {
                continue;
            }
            related.push(RelatedConcept {
                iri: iri.clone(),
                relation,
            });
        }
        let alt_labels = c
            .alt_label
            .iter()
            .filter(|(_, v)| !v.is_empty())
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let concept = KgConcept {
            concept_iri: c.iri.clone(),
            pref_labels: c.pref_label.clone(),
            alt_labels,
            related,
            source_graph: source_id.clone(),
        };
        concept.validate().map_err(KgError::MalformedFixture)?;
        concepts.insert(c.iri.clone(), concept);
    }

    let label_tokens = concepts
        .values()
        .flat_map(|c| {
            c.labels()
                .into_iter()
                .map(|(l, _, _)| (c.concept_iri.clone(), tokenize(l)))
                .collect::<Vec<_>>()
        })
        .collect();

    Ok(FixtureKg {
        source_id,
        concepts,
        label_tokens,
    })
}

impl KgClient for FixtureKg {
    fn source_id(&self) -> &str {
        &self.source_id
    }

    fn find_candidates(&self, surface: &str) -> Result<Vec<KgConcept>, KgError> {
        let needle = tokenize(surface);
        if needle.is_empty() {
            return Ok(Vec::new());
        }
        let mut hits: Vec<&str> = self
            .label_tokens
            .iter()
            .filter(|(_, toks)| toks.len() >= needle.len() && toks.windows(needle.len()).any(|w| w == needle))
            .map(|(iri, _)| iri.as_str())
            .collect();
        hits.sort_unstable();
        hits.dedup();
        Ok(hits.into_iter().map(|i| self.concepts[i].clone()).collect())
    }

    fn concept(&self, iri: &str) -> Result<Option<KgConcept>, KgError> {
        Ok(self.concepts.get(iri).cloned())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn single_concept() {
        let kg = parse_skos_fixture(&json!({
            "concepts": [{"iri": "https://kos.test/x", "prefLabel": {"en": "Survey Mode"}}]
        }))
        .unwrap();
        assert_eq!(kg.len(), 1);
        let found = kg.find_candidates("survey mode").unwrap();
        assert_eq!(found[0].pref_labels["en"], "Survey Mode");
        assert_eq!(found[0].source_graph, "fixture");
    }

    #[test]
    fn dangling_reference_is_named() {
        let err = parse_skos_fixture(&json!({
            "concepts": [{"iri": "https://kos.test/x", "prefLabel": {"en": "x"},
                          "related": ["https://kos.test/missing"]}]
        }))
        .unwrap_err();
        match err {
            KgError::MalformedFixture(msg) => assert!(msg.contains("https://kos.test/missing")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn structural_errors() {
        for bad in [
            json!({"concepts": [{"iri": "not an iri", "prefLabel": {"en": "x"}}]}),
            json!({"concepts": [{"iri": "https://kos.test/x"}]}),
            json!({"concepts": [{"iri": "https://kos.test/x", "prefLabel": {"en": "x"}},
                                {"iri": "https://kos.test/x", "prefLabel": {"en": "y"}}]}),
            json!({"format": "other", "concepts": []}),
            json!({"concept": []}),
        ] {
            assert!(matches!(parse_skos_fixture(&bad), Err(KgError::MalformedFixture(_))), "{bad}");
        }
    }

    #[test]
    fn self_links_and_duplicates_are_dropped() {
        let kg = parse_skos_fixture(&json!({
            "concepts": [
                {"iri": "https://kos.test/x", "prefLabel": {"en": "x"},
                 "related": ["https://kos.test/x", "https://kos.test/y"], "broader": ["https://kos.test/y"]},
                {"iri": "https://kos.test/y", "prefLabel": {"en": "y"}}
            ]
        }))
        .unwrap();
        let x = kg.concept("https://kos.test/x").unwrap().unwrap();
        assert_eq!(x.related.len(), 1);
        assert_eq!(x.related[0].relation, RelationKind::Related);
    }
}
