//! C ABI over trained checkpoints: load, predict, topic reports.
//!
//! Every fallible call returns a [`KgntmStatus`]. On failure a message is
//! kept per thread and read back with [`kgntm_last_error_message`].
//! Strings handed out by this library must be released with
//! [`kgntm_string_free`], models with [`kgntm_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use kgntm::corpus::{parse_corpus, VideoDoc, VocabPolicy};
use kgntm::predictor::{predict, topic_report};
use kgntm::trainer::TrainedModel;
use kgntm::Error;

/// Opaque handle to a loaded model.
pub struct KgntmModel {
    inner: TrainedModel,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KgntmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Checkpoint = 4,
    InvalidInput = 5,
    Runtime = 6,
    Panic = 7,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: KgntmStatus, msg: &str) -> KgntmStatus {
    set_error(msg);
    status
}

fn status_of(e: &Error) -> KgntmStatus {
    match e {
        Error::Io { .. } => KgntmStatus::Io,
        Error::Checkpoint(_) => KgntmStatus::Checkpoint,
        Error::Parse { .. } | Error::Schema(_) | Error::Precondition(_) | Error::Domain(_) | Error::Shape { .. } => {
            KgntmStatus::InvalidInput
        }
        _ => KgntmStatus::Runtime,
    }
}

fn guard(f: impl FnOnce() -> Result<(), KgntmStatus>) -> KgntmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => KgntmStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(KgntmStatus::Panic, "internal panic"),
    }
}

fn lift<T>(r: kgntm::Result<T>) -> Result<T, KgntmStatus> {
    r.map_err(|e| fail(status_of(&e), &e.to_string()))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, KgntmStatus> {
    if p.is_null() {
        return Err(fail(KgntmStatus::NullPointer, &format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(KgntmStatus::InvalidUtf8, &format!("{what} is not UTF-8")))
}

unsafe fn model_arg<'a>(m: *const KgntmModel) -> Result<&'a TrainedModel, KgntmStatus> {
    m.as_ref()
        .map(|m| &m.inner)
        .ok_or_else(|| fail(KgntmStatus::NullPointer, "model is null"))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], KgntmStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(KgntmStatus::NullPointer, &format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn hand_out(s: String, out: *mut *mut c_char) -> Result<(), KgntmStatus> {
    let c = CString::new(s).map_err(|_| fail(KgntmStatus::Runtime, "output contains a nul byte"))?;
    unsafe { *out = c.into_raw() };
    Ok(())
}

fn put_model(tm: TrainedModel, out: *mut *mut KgntmModel) {
    unsafe { *out = Box::into_raw(Box::new(KgntmModel { inner: tm })) };
}

/// Loads a checkpoint written by `kgntm train`. On success `*out` owns a
/// new handle.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn kgntm_model_load(path: *const c_char, out: *mut *mut KgntmModel) -> KgntmStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(KgntmStatus::NullPointer, "out is null"));
        }
        let path = str_arg(path, "path")?;
        put_model(lift(TrainedModel::load(Path::new(path)))?, out);
        Ok(())
    })
}

/// Loads a checkpoint from memory.
///
/// # Safety
/// `bytes` must point to `len` readable bytes and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn kgntm_model_load_bytes(bytes: *const u8, len: usize, out: *mut *mut KgntmModel) -> KgntmStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(KgntmStatus::NullPointer, "out is null"));
        }
        let bytes = slice_arg(bytes, len, "bytes")?;
        put_model(lift(TrainedModel::from_bytes(bytes))?, out);
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from a load call and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn kgntm_model_free(model: *mut KgntmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of topics K, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn kgntm_model_num_topics(model: *const KgntmModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.num_topics())
}

/// Expected widths of the image, motion and audio feature vectors.
///
/// # Safety
/// `model` must be a live handle and the out pointers valid.
#[no_mangle]
pub unsafe extern "C" fn kgntm_model_feature_dims(
    model: *const KgntmModel,
    img: *mut usize,
    mot: *mut usize,
    aud: *mut usize,
) -> KgntmStatus {
    guard(|| {
        let tm = model_arg(model)?;
        if img.is_null() || mot.is_null() || aud.is_null() {
            return Err(fail(KgntmStatus::NullPointer, "dimension output is null"));
        }
        let d = tm.dims();
        *img = d.img;
        *mot = d.mot;
        *aud = d.aud;
        Ok(())
    })
}

/// Predicts one document given as a corpus-format JSON object. Writes a
/// JSON prediction `{id, probability, label, theta}` to `*out`.
///
/// # Safety
/// `model` must be a live handle, `doc_json` nul-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn kgntm_predict_json(
    model: *const KgntmModel,
    doc_json: *const c_char,
    threshold: f64,
    out: *mut *mut c_char,
) -> KgntmStatus {
    guard(|| {
        let tm = model_arg(model)?;
        let doc = str_arg(doc_json, "doc_json")?;
        if out.is_null() {
            return Err(fail(KgntmStatus::NullPointer, "out is null"));
        }
        let (corpus, _) = lift(parse_corpus(std::iter::once(doc), VocabPolicy::Given(tm.vocab.clone()), Some(tm.dims())))?;
        let Some(doc) = corpus.docs.first() else {
            return Err(fail(KgntmStatus::InvalidInput, "doc_json is empty"));
        };
        let p = lift(predict(tm, doc, threshold))?;
        hand_out(serde_json::to_string(&p).expect("plain struct"), out)
    })
}

/// Predicts from raw arrays. `transcript` holds regular-vocabulary ids and
/// may be null with `transcript_len` 0 for a video without narration.
/// `theta_out`, if not null, receives K topic proportions.
///
/// # Safety
/// Every non-null array must hold the stated number of elements.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn kgntm_predict_features(
    model: *const KgntmModel,
    f_img: *const f64,
    img_len: usize,
    f_mot: *const f64,
    mot_len: usize,
    f_aud: *const f64,
    aud_len: usize,
    transcript: *const u32,
    transcript_len: usize,
    threshold: f64,
    probability_out: *mut f64,
    label_out: *mut u8,
    theta_out: *mut f64,
) -> KgntmStatus {
    guard(|| {
        let tm = model_arg(model)?;
        if probability_out.is_null() || label_out.is_null() {
            return Err(fail(KgntmStatus::NullPointer, "probability_out or label_out is null"));
        }
        let transcript = slice_arg(transcript, transcript_len, "transcript")?;
        let doc = VideoDoc {
            id: String::new(),
            transcript: (!transcript.is_empty()).then(|| transcript.iter().map(|&w| w as usize).collect()),
            comments: Vec::new(),
            comment_lengths: Vec::new(),
            f_img: slice_arg(f_img, img_len, "f_img")?.to_vec(),
            f_mot: slice_arg(f_mot, mot_len, "f_mot")?.to_vec(),
            f_aud: slice_arg(f_aud, aud_len, "f_aud")?.to_vec(),
            label: None,
            comment_flags: None,
        };
        let p = lift(predict(tm, &doc, threshold))?;
        *probability_out = p.probability;
        *label_out = p.label;
        if !theta_out.is_null() {
            std::slice::from_raw_parts_mut(theta_out, p.theta.len()).copy_from_slice(&p.theta);
        }
        Ok(())
    })
}

/// Per-topic top words and seed-topic weights as JSON.
///
/// # Safety
/// `model` must be a live handle and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn kgntm_topic_report_json(model: *const KgntmModel, top_n: usize, out: *mut *mut c_char) -> KgntmStatus {
    guard(|| {
        let tm = model_arg(model)?;
        if out.is_null() {
            return Err(fail(KgntmStatus::NullPointer, "out is null"));
        }
        let report = lift(topic_report(tm, &[], top_n))?;
        hand_out(serde_json::to_string(&report).expect("plain struct"), out)
    })
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn kgntm_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Message of the last failure on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn kgntm_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}
