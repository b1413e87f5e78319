use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;
use std::sync::OnceLock;

use kgntm::corpus::{doc_to_json, save_corpus};
use kgntm::synth::{generate, SynthConfig};
use kgntm::trainer::{fit, TrainConfig, TrainedModel};
use kgntm_ffi::*;

struct Fixture {
    dir: tempfile::TempDir,
    model: PathBuf,
    doc_json: String,
    tm: TrainedModel,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let cfg = SynthConfig {
            num_docs: 40,
            k: 4,
            v: 40,
            num_categories: 2,
            seeds_per_category: 2,
            comment_words: 12,
            words_per_comment: 4,
            transcript_words: 8,
            ..SynthConfig::default()
        };
        let data = generate(&cfg).unwrap();
        let mut tc = TrainConfig::default();
        tc.hp.k = 4;
        tc.max_epochs = 3;
        tc.min_epochs = 1;
        tc.inference_hidden = vec![8];
        tc.generative_hidden = vec![8];
        tc.pretrain.iterations = 5;
        tc.distill_epochs = 2;
        let (tm, _, _) = fit(&data.corpus, &data.ontology, &tc).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let model = dir.path().join("model.kgntm");
        tm.save(&model).unwrap();
        save_corpus(&data.corpus, &dir.path().join("corpus.jsonl")).unwrap();
        let doc_json = doc_to_json(&data.corpus.docs[0], &data.corpus.vocab);
        Fixture { dir, model, doc_json, tm }
    })
}

fn load(path: &Path) -> *mut KgntmModel {
    let p = CString::new(path.to_str().unwrap()).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { kgntm_model_load(p.as_ptr(), &mut m) }, KgntmStatus::Ok);
    assert!(!m.is_null());
    m
}

fn last_error() -> String {
    let p = kgntm_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string()
}

#[test]
fn load_query_free() {
    let f = fixture();
    let m = load(&f.model);
    unsafe {
        assert_eq!(kgntm_model_num_topics(m), 4);
        let (mut a, mut b, mut c) = (0, 0, 0);
        assert_eq!(kgntm_model_feature_dims(m, &mut a, &mut b, &mut c), KgntmStatus::Ok);
        assert_eq!((a, b, c), (8, 8, 8));
        kgntm_model_free(m);
        kgntm_model_free(ptr::null_mut());
        assert_eq!(kgntm_model_num_topics(ptr::null()), 0);
    }
}

#[test]
fn json_prediction_matches_library() {
    let f = fixture();
    let m = load(&f.model);
    let doc = CString::new(f.doc_json.clone()).unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { kgntm_predict_json(m, doc.as_ptr(), 0.5, &mut out) }, KgntmStatus::Ok);
    let got: serde_json::Value = serde_json::from_str(unsafe { CStr::from_ptr(out) }.to_str().unwrap()).unwrap();
    unsafe {
        kgntm_string_free(out);
        kgntm_model_free(m);
    }
    let (corpus, _) = kgntm::corpus::parse_corpus(
        std::iter::once(f.doc_json.as_str()),
        kgntm::corpus::VocabPolicy::Given(f.tm.vocab.clone()),
        Some(f.tm.dims()),
    )
    .unwrap();
    let want = kgntm::predictor::predict(&f.tm, &corpus.docs[0], 0.5).unwrap();
    assert_eq!(got["probability"].as_f64().unwrap(), want.probability);
    assert_eq!(got["label"].as_u64().unwrap(), u64::from(want.label));
    assert_eq!(got["theta"].as_array().unwrap().len(), 4);
}

#[test]
fn raw_array_prediction() {
    let f = fixture();
    let m = load(&f.model);
    let feat = [0.1f64; 8];
    let words = [0u32, 3, 5];
    let (mut p, mut y) = (0.0, 9u8);
    let mut theta = [0.0f64; 4];
    let s = unsafe {
        kgntm_predict_features(m, feat.as_ptr(), 8, feat.as_ptr(), 8, feat.as_ptr(), 8, words.as_ptr(), 3, 0.5, &mut p, &mut y, theta.as_mut_ptr())
    };
    assert_eq!(s, KgntmStatus::Ok);
    assert!((0.0..=1.0).contains(&p));
    assert_eq!(y, u8::from(p > 0.5));
    assert!((theta.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    // no transcript takes the features-only network
    let s = unsafe {
        kgntm_predict_features(m, feat.as_ptr(), 8, feat.as_ptr(), 8, feat.as_ptr(), 8, ptr::null(), 0, 0.5, &mut p, &mut y, ptr::null_mut())
    };
    assert_eq!(s, KgntmStatus::Ok);
    // wrong feature width
    let s = unsafe {
        kgntm_predict_features(m, feat.as_ptr(), 7, feat.as_ptr(), 8, feat.as_ptr(), 8, ptr::null(), 0, 0.5, &mut p, &mut y, ptr::null_mut())
    };
    assert_eq!(s, KgntmStatus::InvalidInput);
    assert!(!last_error().is_empty());
    unsafe { kgntm_model_free(m) };
}

#[test]
fn topic_report_json() {
    let f = fixture();
    let m = load(&f.model);
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { kgntm_topic_report_json(m, 3, &mut out) }, KgntmStatus::Ok);
    let v: serde_json::Value = serde_json::from_str(unsafe { CStr::from_ptr(out) }.to_str().unwrap()).unwrap();
    unsafe {
        kgntm_string_free(out);
        kgntm_model_free(m);
    }
    let topics = v["topics"].as_array().unwrap();
    assert_eq!(topics.len(), 4);
    assert_eq!(topics[0]["comment_words"].as_array().unwrap().len(), 3);
}

#[test]
fn errors_are_reported() {
    let f = fixture();
    let mut m = ptr::null_mut();
    let missing = CString::new(f.dir.path().join("nope").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { kgntm_model_load(missing.as_ptr(), &mut m) }, KgntmStatus::Io);
    assert!(m.is_null());
    assert!(last_error().contains("nope"));
    assert_eq!(unsafe { kgntm_model_load(ptr::null(), &mut m) }, KgntmStatus::NullPointer);
    let junk = b"not a checkpoint";
    assert_eq!(unsafe { kgntm_model_load_bytes(junk.as_ptr(), junk.len(), &mut m) }, KgntmStatus::Checkpoint);
    let bad = [0xffu8, 0xfe, 0];
    assert_eq!(unsafe { kgntm_model_load(bad.as_ptr().cast(), &mut m) }, KgntmStatus::InvalidUtf8);

    let m = load(&f.model);
    let mut out = ptr::null_mut();
    let doc = CString::new("{\"id\":1}").unwrap();
    assert_eq!(unsafe { kgntm_predict_json(m, doc.as_ptr(), 0.5, &mut out) }, KgntmStatus::InvalidInput);
    assert!(out.is_null());
    unsafe { kgntm_model_free(m) };
}

#[test]
fn bytes_round_trip() {
    let f = fixture();
    let bytes = std::fs::read(&f.model).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { kgntm_model_load_bytes(bytes.as_ptr(), bytes.len(), &mut m) }, KgntmStatus::Ok);
    assert_eq!(unsafe { kgntm_model_num_topics(m) }, 4);
    unsafe { kgntm_model_free(m) };
}

const C_PROGRAM: &str = r#"
#include <stdio.h>
#include "kgntm.h"

int main(int argc, char **argv) {
    KgntmModel *m = NULL;
    if (kgntm_model_load(argv[1], &m) != KGNTM_STATUS_OK) {
        fprintf(stderr, "%s\n", kgntm_last_error_message());
        return 1;
    }
    size_t k = kgntm_model_num_topics(m);
    char *report = NULL;
    if (kgntm_topic_report_json(m, 2, &report) != KGNTM_STATUS_OK) return 2;
    kgntm_string_free(report);
    double f[8] = {0};
    double p = -1.0, theta[16];
    uint8_t y = 9;
    if (kgntm_predict_features(m, f, 8, f, 8, f, 8, NULL, 0, 0.5, &p, &y, theta) != KGNTM_STATUS_OK) return 3;
    KgntmModel *bad = NULL;
    KgntmStatus s = kgntm_model_load("/nonexistent/model", &bad);
    kgntm_model_free(m);
    printf("%zu %d %d\n", k, p >= 0.0 && p <= 1.0, (int)s);
    return 0;
}
"#;

/// target/<profile>/deps, next to this test binary. `cargo test` rebuilds
/// the static library there; the copy one level up only moves on `cargo build`.
fn deps_dir() -> PathBuf {
    std::env::current_exe().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn c_program_links_against_header() {
    let f = fixture();
    let crate_dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    let lib = deps_dir().join("libkgntm_ffi.a");
    assert!(lib.exists(), "static library missing at {}", lib.display());
    let src = f.dir.path().join("smoke.c");
    let exe = f.dir.path().join("smoke");
    std::fs::write(&src, C_PROGRAM).unwrap();
    let status = Command::new("cc")
        .arg("-std=c11")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(crate_dir.join("include"))
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&exe).arg(&f.model).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8(out.stdout).unwrap().trim(), "4 1 3");
}
