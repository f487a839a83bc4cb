use std::ffi::{c_char, CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use gw_core::embedding::{HashingEmbedder, DEFAULT_DIMENSION, DEFAULT_SEED};
use gw_ffi::*;
use serde_json::{json, Value};

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> Option<String> {
    let p = gw_last_error_message();
    (!p.is_null()).then(|| unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned())
}

unsafe fn take(p: *mut c_char) -> String {
    assert!(!p.is_null());
    let s = CStr::from_ptr(p).to_str().unwrap().to_owned();
    gw_string_free(p);
    s
}

fn open_offline(dir: &Path) -> *mut GwEngine {
    let config = cstr(&format!("offline = true\ndata_dir = {:?}\n", dir.to_str().unwrap()));
    let mut engine = ptr::null_mut();
    assert_eq!(unsafe { gw_engine_open(config.as_ptr(), &mut engine) }, GwStatus::Ok, "{:?}", last_error());
    assert!(!engine.is_null());
    engine
}

fn request() -> CString {
    cstr(
        &json!({
            "manifest": {
                "collection_id": "c",
                "title": "Tiny",
                "documents": [
                    {"doc_id": "a", "title": "Care work", "authors": ["A. Author"], "language": "en"},
                    {"doc_id": "b", "title": "Panel surveys", "language": "en"}
                ]
            },
            "bodies": {
                "a": "Unpaid care work is still mostly done by women in many households.\n\nChildcare hours rose during the lockdown.",
                "b": "Panel attrition biases estimates when dropout depends on the outcome."
            }
        })
        .to_string(),
    )
}

#[test]
fn constants_match_core() {
    assert_eq!(GW_DEFAULT_DIMENSION, DEFAULT_DIMENSION);
    assert_eq!(GW_DEFAULT_SEED, DEFAULT_SEED);
    let v = unsafe { CStr::from_ptr(gw_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn full_flow_through_the_abi() {
    let dir = tempfile::tempdir().unwrap();
    let engine = open_offline(dir.path());
    unsafe {
        let mut out = ptr::null_mut();
        let id = cstr("c");

        let mut sid = ptr::null_mut();
        assert_eq!(gw_session_create(engine, cstr("nope").as_ptr(), &mut sid), GwStatus::NotFound);
        assert!(last_error().unwrap().contains("nope"));

        assert_eq!(gw_ingest(engine, request().as_ptr(), &mut out), GwStatus::Ok, "{:?}", last_error());
        let report: Value = serde_json::from_str(&take(out)).unwrap();
        assert_eq!(report["documents"], 2);
        assert!(last_error().is_none());

        assert_eq!(gw_session_create(engine, id.as_ptr(), &mut sid), GwStatus::Ok);
        let sid = take(sid);
        let sid_c = cstr(&sid);
        let q = cstr("who does unpaid care work");
        assert_eq!(gw_ask(engine, sid_c.as_ptr(), q.as_ptr(), &mut out), GwStatus::NotIndexed);

        assert_eq!(gw_index(engine, id.as_ptr(), &mut out), GwStatus::Ok);
        let report: Value = serde_json::from_str(&take(out)).unwrap();
        assert!(report["index_size"].as_u64().unwrap() >= 2);

        assert_eq!(gw_ask(engine, sid_c.as_ptr(), q.as_ptr(), &mut out), GwStatus::Ok);
        let answer: Value = serde_json::from_str(&take(out)).unwrap();
        assert_eq!(answer["citations"][0]["doc_id"], "a");
        assert_eq!(answer["turn"], 1);

        assert_eq!(gw_ask(engine, sid_c.as_ptr(), cstr("  ").as_ptr(), &mut out), GwStatus::EmptyQuery);

        assert_eq!(gw_session_history(engine, sid_c.as_ptr(), &mut out), GwStatus::Ok);
        let session: Value = serde_json::from_str(&take(out)).unwrap();
        assert_eq!(session["turns"].as_array().unwrap().len(), 1);

        gw_engine_free(engine);
    }

    // State persists across handles.
    let engine = open_offline(dir.path());
    unsafe {
        let mut sid = ptr::null_mut();
        assert_eq!(gw_session_create(engine, cstr("c").as_ptr(), &mut sid), GwStatus::Ok);
        gw_string_free(sid);
        gw_engine_free(engine);
    }
}

#[test]
fn invalid_arguments_are_reported() {
    unsafe {
        let mut engine = ptr::null_mut();
        assert_eq!(gw_engine_open(ptr::null(), ptr::null_mut()), GwStatus::InvalidArgument);
        let bad = cstr("offline = \"yes\"");
        assert_eq!(gw_engine_open(bad.as_ptr(), &mut engine), GwStatus::InvalidArgument);
        assert!(engine.is_null());
        assert!(last_error().is_some());

        let mut out = ptr::null_mut();
        assert_eq!(gw_index(ptr::null(), cstr("c").as_ptr(), &mut out), GwStatus::InvalidArgument);
        assert_eq!(last_error().as_deref(), Some("engine is null"));

        let dir = tempfile::tempdir().unwrap();
        let engine = open_offline(dir.path());
        assert_eq!(gw_ingest(engine, cstr("{").as_ptr(), &mut out), GwStatus::InvalidArgument);
        assert_eq!(gw_ingest(engine, cstr("{}").as_ptr(), &mut out), GwStatus::InvalidArgument);
        let bad_bodies = json!({"manifest": {"collection_id": "c", "title": "T", "documents": []}, "bodies": {"a": 1}});
        assert_eq!(
            gw_ingest(engine, cstr(&bad_bodies.to_string()).as_ptr(), &mut out),
            GwStatus::InvalidArgument
        );
        assert_eq!(gw_ingest(engine, request().as_ptr(), ptr::null_mut()), GwStatus::InvalidArgument);
        let invalid_utf8 = [0xffu8, 0xfe, 0];
        assert_eq!(
            gw_index(engine, invalid_utf8.as_ptr().cast(), &mut out),
            GwStatus::InvalidArgument
        );
        gw_engine_free(engine);
        gw_engine_free(ptr::null_mut());
        gw_string_free(ptr::null_mut());
    }
}

#[test]
fn embedding_helpers_match_core() {
    let text = "male breadwinner model";
    let mut v = vec![0.0; 64];
    let status = unsafe { gw_hashing_embed(cstr(text).as_ptr(), 64, 7, v.as_mut_ptr()) };
    assert_eq!(status, GwStatus::Ok);
    assert_eq!(v, HashingEmbedder::new(64, 7).embed_text(text).unwrap().values);

    let mut w = vec![0.0; 64];
    unsafe { gw_hashing_embed(cstr("dual earner model").as_ptr(), 64, 7, w.as_mut_ptr()) };
    let mut c = f64::NAN;
    assert_eq!(unsafe { gw_cosine(v.as_ptr(), w.as_ptr(), 64, &mut c) }, GwStatus::Ok);
    let expected: f64 = v.iter().zip(&w).map(|(a, b)| a * b).sum();
    assert!((c - expected).abs() < 1e-15);
    assert_eq!(unsafe { gw_cosine(v.as_ptr(), v.as_ptr(), 64, &mut c) }, GwStatus::Ok);
    assert!((c - 1.0).abs() < 1e-12);

    assert_eq!(
        unsafe { gw_hashing_embed(cstr("?!").as_ptr(), 64, 7, v.as_mut_ptr()) },
        GwStatus::EmptyQuery
    );
    assert_eq!(
        unsafe { gw_hashing_embed(cstr(text).as_ptr(), 0, 7, v.as_mut_ptr()) },
        GwStatus::InvalidArgument
    );
    let nan = [f64::NAN; 4];
    assert_eq!(unsafe { gw_cosine(nan.as_ptr(), nan.as_ptr(), 4, &mut c) }, GwStatus::InvalidArgument);
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/gw.h")).unwrap();
    for name in [
        "gw_engine_open",
        "gw_engine_free",
        "gw_ingest",
        "gw_index",
        "gw_session_create",
        "gw_ask",
        "gw_session_history",
        "gw_hashing_embed",
        "gw_cosine",
        "gw_last_error_message",
        "gw_string_free",
        "gw_version",
        "typedef struct GwEngine GwEngine",
        "GW_STATUS_NOT_INDEXED = 3",
        "GW_DEFAULT_DIMENSION 256",
    ] {
        assert!(header.contains(name), "gw.h lacks {name}");
    }
}

fn target_dir() -> PathBuf {
    // tests run from target/<profile>/deps
    std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn c_program_links_against_static_library() {
    let lib = target_dir().join("libgw_ffi.a");
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    if !lib.exists() || Command::new(&cc).arg("--version").output().is_err() {
        eprintln!("skipping: no C compiler or {} missing", lib.display());
        return;
    }
    let crate_dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    let work = tempfile::tempdir().unwrap();
    let exe = work.path().join("smoke");
    let build = Command::new(&cc)
        .arg(crate_dir.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(crate_dir.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .output()
        .unwrap();
    assert!(build.status.success(), "{}", String::from_utf8_lossy(&build.stderr));
    let data = work.path().join("data");
    let run = Command::new(&exe).arg(&data).output().unwrap();
    assert!(
        run.status.success(),
        "{}{}",
        String::from_utf8_lossy(&run.stdout),
        String::from_utf8_lossy(&run.stderr)
    );
    assert_eq!(String::from_utf8_lossy(&run.stdout).trim(), "ok");
}
