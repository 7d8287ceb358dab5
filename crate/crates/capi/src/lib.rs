//! C ABI over `mmoe-core`.
//!
//! Every function returns an [`MmoeStatus`]; on failure the message is kept
//! per thread and read with [`mmoe_last_error`]. Models are opaque handles
//! created by `mmoe_model_load*` and released with [`mmoe_model_free`].
//! Images are row-major grayscale in [0, 1]. Labels use 0 for real, 1 for fake.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use mmoe_core::encoder::Model;
use mmoe_core::metrics::{self, ScoreSet};
use mmoe_core::moe::cosine_agreement_loss;
use mmoe_core::synthdata::{render_iris, DeviceId};
use mmoe_core::tensor::Tensor;
use mmoe_core::{Error, GrayImage, Label};

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MmoeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Numerical = 4,
    Shape = 5,
    Checkpoint = 6,
    Format = 7,
    BufferTooSmall = 8,
    Panic = 99,
}

/// Opaque model handle.
pub struct MmoeModel {
    model: Model,
}

/// Metrics at one decision threshold plus the threshold-free AUC and EER.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct MmoeMetrics {
    pub acer: f64,
    pub apcer: f64,
    pub bpcer: f64,
    pub acc: f64,
    pub auc: f64,
    pub eer: f64,
    pub eer_threshold: f64,
    pub n_real: usize,
    pub n_fake: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(CString::new(msg).expect("nul removed")));
}

fn status_of(e: &Error) -> MmoeStatus {
    match e {
        Error::Io { .. } => MmoeStatus::Io,
        Error::NonFinite { .. } | Error::Divergence { .. } => MmoeStatus::Numerical,
        Error::Shape { .. } | Error::ContractSpec { .. } | Error::Axis { .. } => MmoeStatus::Shape,
        Error::CheckpointMismatch(_) => MmoeStatus::Checkpoint,
        Error::Format { .. } => MmoeStatus::Format,
        _ => MmoeStatus::InvalidArgument,
    }
}

enum Fail {
    Core(Error),
    Status(MmoeStatus, String),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MmoeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MmoeStatus::Ok,
        Ok(Err(Fail::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Fail::Status(s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("internal panic");
            MmoeStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail::Status(MmoeStatus::NullPointer, format!("null pointer: {what}"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Status(MmoeStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_slice<'a, T>(p: *mut T, len: usize, need: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    if len < need {
        return Err(Fail::Status(MmoeStatus::BufferTooSmall, format!("{what} holds {len}, need {need}")));
    }
    Ok(std::slice::from_raw_parts_mut(p, need))
}

unsafe fn image_arg(pixels: *const f64, width: usize, height: usize) -> Result<GrayImage, Fail> {
    let px = slice_arg(pixels, width * height, "pixels")?;
    Ok(GrayImage::new(width, height, px.to_vec())?)
}

unsafe fn model_ref<'a>(m: *const MmoeModel) -> Result<&'a Model, Fail> {
    if m.is_null() {
        return Err(null("model"));
    }
    Ok(&(*m).model)
}

unsafe fn put<T>(out: *mut T, v: T, what: &str) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null(what));
    }
    *out = v;
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mmoe_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or NULL. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mmoe_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mmoe_model_load(path: *const c_char, out: *mut *mut MmoeModel) -> MmoeStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let model = Model::load(Path::new(path))?;
        put(out, Box::into_raw(Box::new(MmoeModel { model })), "out")
    })
}

/// Loads a checkpoint from its JSON text.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mmoe_model_load_json(json: *const c_char, out: *mut *mut MmoeModel) -> MmoeStatus {
    guard(|| {
        let model = Model::from_checkpoint_json(str_arg(json, "json")?)?;
        put(out, Box::into_raw(Box::new(MmoeModel { model })), "out")
    })
}

/// Releases a model. NULL is ignored.
///
/// # Safety
/// `model` must come from `mmoe_model_load*` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mmoe_model_free(model: *mut MmoeModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Image side and embedding width the model expects.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn mmoe_model_shape(
    model: *const MmoeModel,
    image_side: *mut usize,
    embedding_dim: *mut usize,
) -> MmoeStatus {
    guard(|| {
        let m = model_ref(model)?;
        put(image_side, m.config().image_side, "image_side")?;
        put(embedding_dim, m.config().dim, "embedding_dim")
    })
}

/// Probability that the image is a live iris.
///
/// # Safety
/// `pixels` must hold `width * height` values; all pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn mmoe_model_score(
    model: *const MmoeModel,
    pixels: *const f64,
    width: usize,
    height: usize,
    score: *mut f64,
) -> MmoeStatus {
    guard(|| {
        let m = model_ref(model)?;
        let img = image_arg(pixels, width, height)?;
        put(score, m.classify(&img)?, "score")
    })
}

/// Unit-norm image embedding written to `out` (length `dim`).
///
/// # Safety
/// `pixels` must hold `width * height` values and `out` at least `out_len`.
#[no_mangle]
pub unsafe extern "C" fn mmoe_model_embed(
    model: *const MmoeModel,
    pixels: *const f64,
    width: usize,
    height: usize,
    out: *mut f64,
    out_len: usize,
) -> MmoeStatus {
    guard(|| {
        let m = model_ref(model)?;
        let img = image_arg(pixels, width, height)?;
        let (emb, _) = m.encode_image(&img)?;
        out_slice(out, out_len, emb.len(), "out")?.copy_from_slice(&emb);
        Ok(())
    })
}

/// Metrics over `n` scores with labels 0 (real) or 1 (fake).
///
/// # Safety
/// `scores` and `labels` must hold `n` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mmoe_metrics(
    scores: *const f64,
    labels: *const u8,
    n: usize,
    threshold: f64,
    out: *mut MmoeMetrics,
) -> MmoeStatus {
    guard(|| {
        let scores = slice_arg(scores, n, "scores")?;
        let labels = slice_arg(labels, n, "labels")?
            .iter()
            .map(|&l| match l {
                0 => Ok(Label::Real),
                1 => Ok(Label::Fake),
                other => Err(Fail::Status(MmoeStatus::InvalidArgument, format!("label {other} is not 0 or 1"))),
            })
            .collect::<Result<Vec<_>, _>>()?;
        let set = ScoreSet::new(scores.to_vec(), labels)?;
        let r = metrics::report(&set, threshold)?;
        let e = metrics::eer(&set)?;
        let m = MmoeMetrics {
            acer: r.acer,
            apcer: r.apcer,
            bpcer: r.bpcer,
            acc: r.acc,
            auc: r.auc,
            eer: e.rate,
            eer_threshold: e.threshold,
            n_real: r.n_real,
            n_fake: r.n_fake,
        };
        put(out, m, "out")
    })
}

/// Cosine agreement loss of `experts × slots × dim` expert outputs, expert 0
/// as the reference.
///
/// # Safety
/// `outputs` must hold `experts * slots * dim` values; `loss` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mmoe_cosine_agreement(
    outputs: *const f64,
    experts: usize,
    slots: usize,
    dim: usize,
    loss: *mut f64,
) -> MmoeStatus {
    guard(|| {
        let y = slice_arg(outputs, experts * slots * dim, "outputs")?;
        let t = Tensor::new(&[experts, slots, dim], y.to_vec())?;
        put(loss, cosine_agreement_loss(&t)?.item()?, "loss")
    })
}

/// Renders one synthetic iris. `device` is one of H100, DALSA, LG2200,
/// AI1000, LG4000, AD100; `group` is 0 or 1. Writes `size * size` pixels.
///
/// # Safety
/// `device` must be a NUL-terminated string and `out` hold `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn mmoe_render_iris(
    identity: u64,
    label: u8,
    group: u8,
    device: *const c_char,
    size: usize,
    out: *mut f64,
    out_len: usize,
) -> MmoeStatus {
    guard(|| {
        let device = DeviceId::parse(str_arg(device, "device")?)?;
        let label = match label {
            0 => Label::Real,
            1 => Label::Fake,
            other => return Err(Fail::Status(MmoeStatus::InvalidArgument, format!("label {other} is not 0 or 1"))),
        };
        let img = render_iris(identity, label, group, device, size)?;
        out_slice(out, out_len, img.pixels.len(), "out")?.copy_from_slice(&img.pixels);
        Ok(())
    })
}
