use std::ffi::{CStr, CString};
use std::ptr;

use mmoe_capi::*;
use mmoe_core::encoder::{EncoderConfig, Model};
use mmoe_core::synthdata::{render_iris, DeviceId};
use mmoe_core::Label;

fn small_config() -> EncoderConfig {
    EncoderConfig { dim: 8, blocks: 1, heads: 2, mlp_hidden: 16, experts: 2, expert_hidden: 16, mask_rates: vec![0.0, 0.25], ..Default::default() }
}

fn load(model: &Model) -> *mut MmoeModel {
    let json = CString::new(model.to_checkpoint_json().unwrap()).unwrap();
    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { mmoe_model_load_json(json.as_ptr(), &mut handle) }, MmoeStatus::Ok);
    assert!(!handle.is_null());
    handle
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(mmoe_last_error()) }.to_str().unwrap().to_string()
}

#[test]
fn version_matches_crate() {
    let v = unsafe { CStr::from_ptr(mmoe_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn score_and_embed_match_core() {
    let model = Model::init(&small_config()).unwrap();
    let handle = load(&model);
    let img = render_iris(3, Label::Fake, 0, DeviceId::H100, 32).unwrap();

    let (mut side, mut dim) = (0usize, 0usize);
    assert_eq!(unsafe { mmoe_model_shape(handle, &mut side, &mut dim) }, MmoeStatus::Ok);
    assert_eq!((side, dim), (32, 8));

    let mut score = -1.0;
    let st = unsafe { mmoe_model_score(handle, img.pixels.as_ptr(), 32, 32, &mut score) };
    assert_eq!(st, MmoeStatus::Ok);
    assert_eq!(score, model.classify(&img).unwrap());

    let mut emb = vec![0.0; 8];
    let st = unsafe { mmoe_model_embed(handle, img.pixels.as_ptr(), 32, 32, emb.as_mut_ptr(), emb.len()) };
    assert_eq!(st, MmoeStatus::Ok);
    assert_eq!(emb, model.encode_image(&img).unwrap().0);

    let mut short = vec![0.0; 4];
    let st = unsafe { mmoe_model_embed(handle, img.pixels.as_ptr(), 32, 32, short.as_mut_ptr(), short.len()) };
    assert_eq!(st, MmoeStatus::BufferTooSmall);

    let st = unsafe { mmoe_model_score(handle, img.pixels.as_ptr(), 16, 16, &mut score) };
    assert_ne!(st, MmoeStatus::Ok);
    unsafe { mmoe_model_free(handle) };
}

#[test]
fn load_reports_errors() {
    let mut handle = ptr::null_mut();
    let missing = CString::new("/nonexistent/model.json").unwrap();
    assert_eq!(unsafe { mmoe_model_load(missing.as_ptr(), &mut handle) }, MmoeStatus::Io);
    assert!(last_error().contains("/nonexistent/model.json"));
    assert!(handle.is_null());

    let bad = CString::new("{\"format\":\"other\"}").unwrap();
    let st = unsafe { mmoe_model_load_json(bad.as_ptr(), &mut handle) };
    assert!(matches!(st, MmoeStatus::Checkpoint | MmoeStatus::Format), "{st:?}");

    assert_eq!(unsafe { mmoe_model_load(ptr::null(), &mut handle) }, MmoeStatus::NullPointer);
    unsafe { mmoe_model_free(ptr::null_mut()) };
}

#[test]
fn file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    let model = Model::init(&small_config()).unwrap();
    model.save(&path).unwrap();
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { mmoe_model_load(c.as_ptr(), &mut handle) }, MmoeStatus::Ok);
    unsafe { mmoe_model_free(handle) };
}

#[test]
fn metrics_hand_case() {
    let scores = [0.9, 0.8, 0.4, 0.7, 0.2, 0.1];
    let labels = [0u8, 0, 0, 1, 1, 1];
    let mut m = MmoeMetrics::default();
    assert_eq!(unsafe { mmoe_metrics(scores.as_ptr(), labels.as_ptr(), 6, 0.5, &mut m) }, MmoeStatus::Ok);
    assert_eq!((m.n_real, m.n_fake), (3, 3));
    assert_eq!(m.apcer, 1.0 / 3.0);
    assert_eq!(m.bpcer, 1.0 / 3.0);
    assert_eq!(m.acer, 1.0 / 3.0);
    assert!((m.auc - 8.0 / 9.0).abs() < 1e-12);

    let bad = [0u8, 0, 0, 1, 1, 7];
    let st = unsafe { mmoe_metrics(scores.as_ptr(), bad.as_ptr(), 6, 0.5, &mut m) };
    assert_eq!(st, MmoeStatus::InvalidArgument);
    let nan = [f64::NAN, 0.8, 0.4, 0.7, 0.2, 0.1];
    assert_ne!(unsafe { mmoe_metrics(nan.as_ptr(), labels.as_ptr(), 6, 0.5, &mut m) }, MmoeStatus::Ok);
}

#[test]
fn cosine_agreement_closed_forms() {
    let same = [1.0, 2.0, 1.0, 2.0, 1.0, 2.0];
    let mut loss = f64::NAN;
    assert_eq!(unsafe { mmoe_cosine_agreement(same.as_ptr(), 3, 1, 2, &mut loss) }, MmoeStatus::Ok);
    assert!(loss.abs() < 1e-12);
    let orth = [1.0, 0.0, 0.0, 1.0];
    assert_eq!(unsafe { mmoe_cosine_agreement(orth.as_ptr(), 2, 1, 2, &mut loss) }, MmoeStatus::Ok);
    assert!((loss - 1.0).abs() < 1e-12);
    assert_eq!(unsafe { mmoe_cosine_agreement(orth.as_ptr(), 1, 2, 2, &mut loss) }, MmoeStatus::InvalidArgument);
}

#[test]
fn render_matches_core() {
    let dev = CString::new("LG4000").unwrap();
    let mut px = vec![0.0; 32 * 32];
    let st = unsafe { mmoe_render_iris(11, 0, 1, dev.as_ptr(), 32, px.as_mut_ptr(), px.len()) };
    assert_eq!(st, MmoeStatus::Ok);
    assert_eq!(px, render_iris(11, Label::Real, 1, DeviceId::LG4000, 32).unwrap().pixels);

    let unknown = CString::new("nope").unwrap();
    let st = unsafe { mmoe_render_iris(11, 0, 1, unknown.as_ptr(), 32, px.as_mut_ptr(), px.len()) };
    assert_eq!(st, MmoeStatus::Format);
    assert!(last_error().contains("nope"));
}
