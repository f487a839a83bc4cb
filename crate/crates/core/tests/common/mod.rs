#![allow(dead_code)]

use std::path::{Path, PathBuf};

use gw_core::ingest::{load_bodies, load_manifest};
use gw_core::service::{Engine, ServiceConfig};

pub const SAMPLE_QUERY: &str = "explain male breadwinner model to me";

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

pub fn golden(name: &str) -> PathBuf {
    fixtures().join("golden").join(name)
}

pub fn offline_config(data_dir: &Path) -> ServiceConfig {
    let mut c = ServiceConfig {
        data_dir: data_dir.to_path_buf(),
        offline: true,
        ..ServiceConfig::default()
    };
    c.kg.fixture = Some(fixtures().join("kos-mini.ttl-json"));
    c
}

/// An offline engine with the mini collection ingested and indexed.
pub fn indexed_engine(data_dir: &Path) -> Engine {
    let engine = Engine::open(offline_config(data_dir)).unwrap();
    ingest_mini(&engine);
    engine.index("mda-mini").unwrap();
    engine
}

pub fn ingest_mini(engine: &Engine) {
    let manifest = load_manifest(&fixtures().join("mda-mini.json")).unwrap();
    let bodies = load_bodies(&fixtures().join("mda-mini"), &manifest).unwrap();
    engine.ingest(&manifest, &bodies).unwrap();
}

/// Compares `actual` with the golden file, or rewrites the file when
/// `GW_BLESS=1`.
pub fn check_golden(name: &str, actual: &str) {
    let path = golden(name);
    if std::env::var("GW_BLESS").as_deref() == Ok("1") {
        std::fs::write(&path, actual).unwrap();
        return;
    }
    let expected = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(actual, expected, "golden {name} differs; rerun with GW_BLESS=1 after review");
}
