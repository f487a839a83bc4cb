mod common;

use std::collections::BTreeMap;

use common::{check_golden, indexed_engine, SAMPLE_QUERY};
use gw_core::embedding::embed_one;
use gw_core::retrieval::{build_probes, retrieve, ProbeKind, RankedRetrieval, RetrievalConfig, RetrievalContext};
use serde_json::json;

fn summary(r: &RankedRetrieval) -> String {
    let clusters: Vec<_> = r
        .clusters
        .iter()
        .map(|c| {
            json!({
                "doc_id": c.doc.doc_id,
                "doc_score": c.doc_score,
                "confidence": c.confidence,
                "hits": c.hits.iter().map(|h| json!({
                    "fragment_id": h.fragment_id,
                    "score": h.score,
                    "probe": h.probe_label,
                })).collect::<Vec<_>>(),
            })
        })
        .collect();
    serde_json::to_string_pretty(&json!({
        "query": r.query,
        "probes_used": r.probes_used,
        "clusters": clusters,
    }))
    .unwrap()
        + "\n"
}

#[test]
fn sample_query_matches_brute_force_and_golden() {
    let dir = tempfile::tempdir().unwrap();
    let engine = indexed_engine(dir.path());
    let state = engine.snapshot("mda-mini").unwrap();
    let indexed = state.indexed.as_ref().unwrap();
    let p = engine.providers();
    let ctx = RetrievalContext {
        store: &state.store,
        index: &indexed.index,
        extractor: p.extractor.as_ref(),
        kg: p.kg.as_ref(),
        embedder: p.embedder.as_ref(),
    };
    let config = RetrievalConfig::default();
    let ranked = retrieve(SAMPLE_QUERY, &[], &ctx, &config).unwrap();

    // Brute force: every fragment scored as max over probes of w * cos.
    let probes = build_probes(SAMPLE_QUERY, &[], ctx.extractor, ctx.kg, ctx.embedder, &config).unwrap();
    let mut scored: Vec<(f64, String, String)> = state
        .store
        .fragments
        .iter()
        .map(|f| {
            let v = embed_one(&f.text, ctx.embedder).unwrap();
            let best = probes
                .iter()
                .map(|pr| pr.info.weight * pr.vector.values.iter().zip(&v.values).map(|(a, b)| a * b).sum::<f64>())
                .fold(f64::NEG_INFINITY, f64::max);
            (best, f.fragment_id.clone(), f.doc_id.clone())
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
    scored.truncate(config.k);
    scored.retain(|s| s.0 >= config.score_floor);

    let mut by_doc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (s, _, d) in &scored {
        by_doc.entry(d.clone()).or_default().push(*s);
    }
    let mut docs: Vec<(f64, String)> = by_doc
        .iter()
        .map(|(d, s)| {
            let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mean = s.iter().sum::<f64>() / s.len() as f64;
            (config.alpha * max + (1.0 - config.alpha) * mean, d.clone())
        })
        .collect();
    docs.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));

    assert_eq!(ranked.clusters.len(), docs.len());
    for (c, (score, doc)) in ranked.clusters.iter().zip(&docs) {
        assert_eq!(&c.doc.doc_id, doc);
        assert!((c.doc_score - score).abs() < 1e-9);
        assert!((0.0..=1.0).contains(&c.confidence));
    }
    let hit_total: usize = ranked.clusters.iter().map(|c| c.hits.len()).sum();
    assert_eq!(hit_total, scored.len());

    assert_eq!(ranked.clusters[0].doc.doc_id, "d04");
    assert!(ranked.clusters.iter().any(|c| c.doc.doc_id == "d05"));
    assert!(ranked
        .probes_used
        .iter()
        .any(|p| p.label == "Ernährermodell" && matches!(&p.kind, ProbeKind::Expansion { language } if language == "de")));

    check_golden("retrieval-sample-query.json", &summary(&ranked));
}

#[test]
fn follow_up_carries_decayed_session_probe() {
    let dir = tempfile::tempdir().unwrap();
    let engine = indexed_engine(dir.path());
    let state = engine.snapshot("mda-mini").unwrap();
    let indexed = state.indexed.as_ref().unwrap();
    let p = engine.providers();
    let ctx = RetrievalContext {
        store: &state.store,
        index: &indexed.index,
        extractor: p.extractor.as_ref(),
        kg: p.kg.as_ref(),
        embedder: p.embedder.as_ref(),
    };
    let prior = vec![SAMPLE_QUERY.to_string()];
    let ranked = retrieve("how did it change in Germany", &prior, &ctx, &RetrievalConfig::default()).unwrap();
    let session = ranked
        .probes_used
        .iter()
        .find(|p| matches!(p.kind, ProbeKind::Session { age: 1 }))
        .expect("session probe");
    assert_eq!(session.label, "male breadwinner model");
    assert!((session.weight - 0.15).abs() < 1e-12);
    assert!(!ranked.clusters.is_empty());
}
