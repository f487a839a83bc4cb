//! Knowledge-graph term enrichment.
//!
//! Terms are linked to a concept by label match and then carry the
//! concept's labels (in every language) as weighted expansion labels.
//! `expand_terms` optionally follows `related`/`broader` links for one or two
//! hops, decaying the weight per hop.

mod skos;
mod sparql;

use std::collections::{BTreeMap, HashSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::terms::Term;
use crate::text::{normalize_term, primary_subtag, tokenize};

pub use skos::{load_skos_fixture, parse_skos_fixture, FixtureKg, SKOS_FIXTURE_FORMAT};
pub use sparql::{ResponseCache, SparqlKgClient, SKOS_NS};

#[derive(Debug, Error)]
pub enum KgError {
    #[error("knowledge graph `{source_id}` unavailable: {message}")]
    KgUnavailable { source_id: String, message: String },
    #[error("malformed fixture: {0}")]
    MalformedFixture(String),
    #[error("expansion depth {0} out of range 0..=2")]
    InvalidDepth(u8),
    #[error("i/o error on `{path}`: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "predicate")]
pub enum RelationKind {
    Related,
    Broader,
    /// Any other configured predicate IRI (e.g. a Wikidata property path).
    Other(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelatedConcept {
    pub iri: String,
    pub relation: RelationKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KgConcept {
    pub concept_iri: String,
    pub pref_labels: BTreeMap<String, String>,
    #[serde(default)]
    pub alt_labels: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub related: Vec<RelatedConcept>,
    pub source_graph: String,
}

impl KgConcept {
    /// `(label, language, is_pref)` in a stable order: preferred labels by
    /// language tag, then alternative labels by language tag.
    pub fn labels(&self) -> Vec<(&str, &str, bool)> {
        let prefs = self
            .pref_labels
            .iter()
            .map(|(lang, l)| (l.as_str(), lang.as_str(), true));
        let alts = self
            .alt_labels
            .iter()
            .flat_map(|(lang, ls)| ls.iter().map(move |l| (l.as_str(), lang.as_str(), false)));
        prefs.chain(alts).collect()
    }

    /// Checks the structural invariants shared by every client.
    pub fn validate(&self) -> Result<(), String> {
        if !is_iri(&self.concept_iri) {
            return Err(format!("`{}` is not an IRI", self.concept_iri));
        }
        if self.pref_labels.is_empty() {
            return Err(format!("concept `{}` has no prefLabel", self.concept_iri));
        }
        let mut seen = HashSet::new();
        for r in &self.related {
            if r.iri == self.concept_iri {
                return Err(format!("concept `{}` relates to itself", self.concept_iri));
            }
            if !seen.insert(&r.iri) {
                return Err(format!(
                    "concept `{}` lists `{}` twice",
                    self.concept_iri, r.iri
                ));
            }
        }
        Ok(())
    }
}

pub fn is_iri(s: &str) -> bool {
    !s.is_empty() && !s.chars().any(char::is_whitespace) && url::Url::parse(s).is_ok()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionLabel {
    pub label: String,
    pub language: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnrichedTerm {
    pub term: Term,
    pub concept: Option<KgConcept>,
    pub expansion_labels: Vec<ExpansionLabel>,
}

/// A knowledge graph that can be searched by label. Implementations must be
/// shareable across threads.
pub trait KgClient: Send + Sync {
    fn source_id(&self) -> &str;

    /// Concepts with at least one label whose tokens contain the tokens of
    /// `surface` as a contiguous sequence.
    fn find_candidates(&self, surface: &str) -> Result<Vec<KgConcept>, KgError>;

    fn concept(&self, iri: &str) -> Result<Option<KgConcept>, KgError>;
}

/// A graph with no concepts; every term stays unlinked.
#[derive(Debug, Clone, Default)]
pub struct EmptyKg;

impl KgClient for EmptyKg {
    fn source_id(&self) -> &str {
        "empty"
    }

    fn find_candidates(&self, _surface: &str) -> Result<Vec<KgConcept>, KgError> {
        Ok(Vec::new())
    }

    fn concept(&self, _iri: &str) -> Result<Option<KgConcept>, KgError> {
        Ok(None)
    }
}

#[derive(Debug, Clone)]
pub struct ExpandConfig {
    pub hop_decay: f64,
    pub max_related_labels: usize,
}

impl Default for ExpandConfig {
    fn default() -> Self {
        Self {
            hop_decay: 0.5,
            max_related_labels: 8,
        }
    }
}

/// Match quality of a concept for a surface; lower is better.
/// 0 = exact preferred label, 1 = exact alternative label,
/// 2 = a label containing the surface (ranked by label length).
fn match_rank(concept: &KgConcept, surface: &[String]) -> Option<(u8, usize)> {
    concept
        .labels()
        .into_iter()
        .filter_map(|(label, _, is_pref)| {
            let toks = tokenize(label);
            if toks == surface {
                Some((if is_pref { 0 } else { 1 }, 0))
            } else if toks.len() > surface.len() && toks.windows(surface.len()).any(|w| w == surface) {
                Some((2, toks.len()))
            } else {
                None
            }
        })
        .min()
}

fn labels_equal(a: &str, b: &str) -> bool {
    normalize_term(a) == normalize_term(b)
}

fn language_allowed(lang: &str, languages: &[String]) -> bool {
    languages.is_empty()
        || languages
            .iter()
            .any(|l| l.eq_ignore_ascii_case(lang) || primary_subtag(l) == primary_subtag(lang) && !l.contains('-'))
}

/// Links a term to its best-matching concept. Exact label matches win over
/// containment; ties go to the lexicographically smallest IRI.
pub fn link_term(term: &Term, kg: &dyn KgClient) -> Result<EnrichedTerm, KgError> {
    let surface = tokenize(&term.surface);
    if surface.is_empty() {
        return Ok(EnrichedTerm {
            term: term.clone(),
            concept: None,
            expansion_labels: Vec::new(),
        });
    }
    let best = kg
        .find_candidates(&term.surface)?
        .into_iter()
        .filter_map(|c| match_rank(&c, &surface).map(|r| (r, c)))
        .min_by(|(ra, a), (rb, b)| ra.cmp(rb).then_with(|| a.concept_iri.cmp(&b.concept_iri)));

    let Some((_, concept)) = best else {
        return Ok(EnrichedTerm {
            term: term.clone(),
            concept: None,
            expansion_labels: Vec::new(),
        });
    };
    let base = term.weight.min(1.0);
    let mut expansion_labels: Vec<ExpansionLabel> = Vec::new();
    if base > 0.0 {
        for (label, lang, _) in concept.labels() {
            push_label(&mut expansion_labels, &term.surface, label, lang, base);
        }
    }
    Ok(EnrichedTerm {
        term: term.clone(),
        concept: Some(concept),
        expansion_labels,
    })
}

/// Adds a label unless it repeats the term or an earlier label
/// (case-insensitively). Returns whether it was added.
fn push_label(out: &mut Vec<ExpansionLabel>, surface: &str, label: &str, lang: &str, weight: f64) -> bool {
    if labels_equal(label, surface) || out.iter().any(|e| labels_equal(&e.label, label)) {
        return false;
    }
    out.push(ExpansionLabel {
        label: label.to_owned(),
        language: lang.to_owned(),
        weight,
    });
    true
}

/// Restricts expansion labels to `languages` (empty = all) and appends the
/// labels of related concepts up to `depth` hops, weighted
/// `base * hop_decay^hop`. Output order and length match the input.
pub fn expand_terms(
    terms: &[EnrichedTerm],
    languages: &[String],
    depth: u8,
    kg: &dyn KgClient,
    config: &ExpandConfig,
) -> Result<Vec<EnrichedTerm>, KgError> {
    if depth > 2 {
        return Err(KgError::InvalidDepth(depth));
    }
    terms
        .iter()
        .map(|t| expand_one(t, languages, depth, kg, config))
        .collect()
}

fn expand_one(
    term: &EnrichedTerm,
    languages: &[String],
    depth: u8,
    kg: &dyn KgClient,
    config: &ExpandConfig,
) -> Result<EnrichedTerm, KgError> {
    let mut out = term.clone();
    out.expansion_labels
        .retain(|l| language_allowed(&l.language, languages));
    let Some(root) = &term.concept else {
        return Ok(out);
    };
    let base = term.term.weight.min(1.0);
    if depth == 0 || base <= 0.0 {
        return Ok(out);
    }

    let mut visited: HashSet<String> = HashSet::from([root.concept_iri.clone()]);
    let mut frontier: VecDeque<(KgConcept, u8)> = VecDeque::from([(root.clone(), 0)]);
    let mut added = 0usize;
    'bfs: while let Some((concept, hop)) = frontier.pop_front() {
        if hop >= depth {
            continue;
        }
        for rel in &concept.related {
            if !visited.insert(rel.iri.clone()) {
                continue;
            }
            let Some(next) = kg.concept(&rel.iri)? else {
                continue;
            };
            let weight = base * config.hop_decay.powi(i32::from(hop) + 1);
            for (label, lang, _) in next.labels() {
                if added >= config.max_related_labels {
                    break 'bfs;
                }
                if language_allowed(lang, languages)
                    && push_label(&mut out.expansion_labels, &term.term.surface, label, lang, weight)
                {
                    added += 1;
                }
            }
            frontier.push_back((next, hop + 1));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn term(surface: &str, weight: f64) -> Term {
        Term {
            surface: surface.into(),
            weight,
            source_fragments: vec!["query".into()],
        }
    }

    fn fixture() -> FixtureKg {
        parse_skos_fixture(
            &json!({
                "format": "gw-skos", "version": 1, "source": "test",
                "concepts": [
                    {"iri": "https://kos.test/mbm",
                     "prefLabel": {"en": "male breadwinner model", "de": "männliches Ernährermodell"},
                     "altLabel": {"en": ["breadwinner model", "Male Breadwinner Model"], "de": ["Ernährermodell"]},
                     "related": ["https://kos.test/dual", "https://kos.test/care"],
                     "broader": ["https://kos.test/welfare"]},
                    {"iri": "https://kos.test/dual",
                     "prefLabel": {"en": "dual earner model", "de": "Zweiverdienermodell"},
                     "related": ["https://kos.test/care"]},
                    {"iri": "https://kos.test/care",
                     "prefLabel": {"en": "care work"},
                     "related": ["https://kos.test/deep"]},
                    {"iri": "https://kos.test/welfare",
                     "prefLabel": {"en": "welfare state regime"}},
                    {"iri": "https://kos.test/deep",
                     "prefLabel": {"en": "unpaid labour"}},
                    {"iri": "https://kos.test/b", "prefLabel": {"en": "zeta"}, "altLabel": {"en": ["shared alt"]}},
                    {"iri": "https://kos.test/a", "prefLabel": {"en": "eta"}, "altLabel": {"en": ["shared alt"]}}
                ]
            }),
        )
        .unwrap()
    }

    fn labels(t: &EnrichedTerm) -> Vec<(&str, &str, f64)> {
        t.expansion_labels
            .iter()
            .map(|l| (l.label.as_str(), l.language.as_str(), l.weight))
            .collect()
    }

    #[test]
    fn exact_pref_label_links() {
        let kg = fixture();
        let e = link_term(&term("male breadwinner model", 1.0), &kg).unwrap();
        assert_eq!(e.concept.as_ref().unwrap().concept_iri, "https://kos.test/mbm");
        assert_eq!(
            labels(&e),
            vec![
                ("männliches Ernährermodell", "de", 1.0),
                ("Ernährermodell", "de", 1.0),
                ("breadwinner model", "en", 1.0),
            ]
        );
    }

    #[test]
    fn no_match_and_tie_break() {
        let kg = fixture();
        let e = link_term(&term("zzxqy nonsense", 0.5), &kg).unwrap();
        assert!(e.concept.is_none());
        assert!(e.expansion_labels.is_empty());
        let e = link_term(&term("shared alt", 0.5), &kg).unwrap();
        assert_eq!(e.concept.unwrap().concept_iri, "https://kos.test/a");
    }

    #[test]
    fn containment_prefers_closest_label() {
        let kg = fixture();
        // "model" is contained in three labels; the shortest one wins.
        let e = link_term(&term("model", 0.2), &kg).unwrap();
        assert_eq!(e.concept.unwrap().concept_iri, "https://kos.test/mbm");
        let e = link_term(&term("earner", 0.2), &kg).unwrap();
        assert_eq!(e.concept.unwrap().concept_iri, "https://kos.test/dual");
    }

    #[test]
    fn expansion_weights_capped_by_term_weight() {
        let kg = fixture();
        let e = link_term(&term("breadwinner model", 7.5), &kg).unwrap();
        assert!(e.expansion_labels.iter().all(|l| l.weight == 1.0));
        let e = link_term(&term("breadwinner model", 0.25), &kg).unwrap();
        assert!(e.expansion_labels.iter().all(|l| l.weight == 0.25));
        assert!(!e.expansion_labels.iter().any(|l| labels_equal(&l.label, "breadwinner model")));
    }

    #[test]
    fn depth_zero_is_identity() {
        let kg = fixture();
        let linked = vec![
            link_term(&term("male breadwinner model", 1.0), &kg).unwrap(),
            link_term(&term("nothing here", 1.0), &kg).unwrap(),
        ];
        let out = expand_terms(&linked, &[], 0, &kg, &ExpandConfig::default()).unwrap();
        assert_eq!(out, linked);
        assert!(matches!(
            expand_terms(&linked, &[], 3, &kg, &ExpandConfig::default()),
            Err(KgError::InvalidDepth(3))
        ));
    }

    #[test]
    fn depth_one_decays_related_labels() {
        let kg = fixture();
        let linked = vec![link_term(&term("male breadwinner model", 1.0), &kg).unwrap()];
        let out = expand_terms(&linked, &[], 1, &kg, &ExpandConfig::default()).unwrap();
        let l = labels(&out[0]);
        assert!(l.contains(&("dual earner model", "en", 0.5)));
        assert!(l.contains(&("Zweiverdienermodell", "de", 0.5)));
        assert!(l.contains(&("care work", "en", 0.5)));
        assert!(l.contains(&("welfare state regime", "en", 0.5)));
        assert!(!l.iter().any(|(s, _, _)| *s == "unpaid labour"));

        let deeper = expand_terms(&linked, &[], 2, &kg, &ExpandConfig::default()).unwrap();
        assert!(labels(&deeper[0]).contains(&("unpaid labour", "en", 0.25)));
    }

    #[test]
    fn language_filter() {
        let kg = fixture();
        let linked = vec![link_term(&term("male breadwinner model", 1.0), &kg).unwrap()];
        let en = expand_terms(&linked, &["en".into()], 1, &kg, &ExpandConfig::default()).unwrap();
        assert!(en[0].expansion_labels.iter().all(|l| l.language == "en"));
        let de = expand_terms(&linked, &["de".into()], 2, &kg, &ExpandConfig::default()).unwrap();
        let langs: HashSet<_> = de[0].expansion_labels.iter().map(|l| l.language.as_str()).collect();
        assert_eq!(langs, HashSet::from(["de"]));
    }

    #[test]
    fn related_label_cap() {
        let kg = fixture();
        let linked = vec![link_term(&term("male breadwinner model", 1.0), &kg).unwrap()];
        let config = ExpandConfig {
            max_related_labels: 2,
            ..ExpandConfig::default()
        };
        let out = expand_terms(&linked, &[], 2, &kg, &config).unwrap();
        assert_eq!(out[0].expansion_labels.len(), linked[0].expansion_labels.len() + 2);
    }

    #[test]
    fn iri_syntax() {
        assert!(is_iri("https://kos.test/a"));
        assert!(is_iri("urn:isbn:123"));
        assert!(!is_iri("not an iri"));
        assert!(!is_iri(""));
    }
}
