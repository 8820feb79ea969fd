//! C ABI over the `seqmask` library.
//!
//! Every fallible function returns an [`SmStatus`]; on failure the message
//! is kept per thread and can be read with [`sm_last_error`]. Objects are
//! handed out as opaque pointers and must be released with the matching
//! `*_free` function. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use seqmask::checkpoint::Checkpoint;
use seqmask::config::RunConfig;
use seqmask::model::{Ablation, Model};
use seqmask::synth::generate_dataset;
use seqmask::train::{evaluate, train, DomainRoles};
use seqmask::{Dataset, Error, Modality};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum SmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Data = 5,
    Numerical = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// Which predictor-side perturbation to apply during evaluation.
#[repr(C)]
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum SmAblation {
    None = 0,
    AddNoise = 1,
    UsingRemoved = 2,
}

#[repr(C)]
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum SmModality {
    Text = 0,
    Video = 1,
}

/// Opaque dataset handle.
pub struct SmDataset {
    inner: Dataset,
}

/// Opaque model handle.
pub struct SmModel {
    inner: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).unwrap_or_default());
}

fn status_of(err: &Error) -> SmStatus {
    match err {
        Error::Config(_) => SmStatus::Config,
        Error::Io(_) => SmStatus::Io,
        Error::Numerical { .. } => SmStatus::Numerical,
        Error::Data(_) | Error::Json(_) => SmStatus::Data,
        _ => SmStatus::InvalidArgument,
    }
}

struct Fail(SmStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(SmStatus::NullPointer, format!("`{what}` is null"))
}

/// Runs `body`, converting errors and panics into a status code.
fn guard(body: impl FnOnce() -> Result<(), Fail>) -> SmStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            set_error("");
            SmStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            SmStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(SmStatus::InvalidArgument, format!("`{what}` is not valid UTF-8")))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn config_arg(text: *const c_char) -> Result<RunConfig, Fail> {
    let mut cfg = RunConfig::default();
    if !text.is_null() {
        cfg.apply_text(str_arg(text, "config")?)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn sm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Derivative of the smooth stand-in for the unit step.
#[no_mangle]
pub extern "C" fn sm_surrogate_step_grad(t: f64) -> f64 {
    seqmask::mask::surrogate_step_grad(t)
}

/// Fisher z-test of zero correlation between two length-`n` series.
///
/// # Safety
/// `x` and `y` must point to `n` readable doubles; the outputs to writable
/// storage (either may be null to skip it).
#[no_mangle]
pub unsafe extern "C" fn sm_fisher_z(
    x: *const f64,
    y: *const f64,
    n: usize,
    level: f64,
    out_z: *mut f64,
    out_dependent: *mut bool,
) -> SmStatus {
    guard(|| {
        let (x, y) = (slice_arg(x, n, "x")?, slice_arg(y, n, "y")?);
        let f = seqmask::analysis::fisher_z(x, y, level)?;
        if let Some(z) = out_z.as_mut() {
            *z = f.z;
        }
        if let Some(d) = out_dependent.as_mut() {
            *d = f.dependent;
        }
        Ok(())
    })
}

/// Generates the synthetic dataset described by `config` (`key = value`
/// lines; null means the defaults).
///
/// # Safety
/// `config` must be null or a NUL-terminated string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sm_dataset_generate(config: *const c_char, out: *mut *mut SmDataset) -> SmStatus {
    guard(|| {
        let slot = out_arg(out, "out")?;
        let cfg = config_arg(config)?;
        let inner = generate_dataset(&cfg.causal_spec()?, &cfg.domain_specs())?;
        *slot = Box::into_raw(Box::new(SmDataset { inner }));
        Ok(())
    })
}

/// Reads a JSON-lines dataset.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sm_dataset_load(path: *const c_char, out: *mut *mut SmDataset) -> SmStatus {
    guard(|| {
        let slot = out_arg(out, "out")?;
        let inner = Dataset::load(Path::new(str_arg(path, "path")?))?;
        *slot = Box::into_raw(Box::new(SmDataset { inner }));
        Ok(())
    })
}

/// # Safety
/// `dataset` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sm_dataset_save(dataset: *const SmDataset, path: *const c_char) -> SmStatus {
    guard(|| {
        let ds = dataset.as_ref().ok_or_else(|| null("dataset"))?;
        ds.inner.save(Path::new(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// Number of samples, or 0 for a null handle.
///
/// # Safety
/// `dataset` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sm_dataset_len(dataset: *const SmDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.inner.len())
}

/// # Safety
/// `dataset` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sm_dataset_free(dataset: *mut SmDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Trains a model on `dataset` with the first replica seed of `config`.
///
/// # Safety
/// `dataset` must be a live handle, `config` null or a NUL-terminated
/// string, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sm_model_train(
    dataset: *const SmDataset,
    config: *const c_char,
    out: *mut *mut SmModel,
) -> SmStatus {
    guard(|| {
        let slot = out_arg(out, "out")?;
        let ds = dataset.as_ref().ok_or_else(|| null("dataset"))?;
        let cfg = config_arg(config)?;
        let mut model_cfg = cfg.model.clone();
        model_cfg.seed = cfg.replica_seeds()[0];
        let roles = DomainRoles::from_sources(&ds.inner, &cfg.sources())?;
        let (inner, _) = train(&ds.inner, &model_cfg, &roles)?;
        *slot = Box::into_raw(Box::new(SmModel { inner }));
        Ok(())
    })
}

/// Restores a model from a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sm_model_load(path: *const c_char, out: *mut *mut SmModel) -> SmStatus {
    guard(|| {
        let slot = out_arg(out, "out")?;
        let inner = Checkpoint::load(Path::new(str_arg(path, "path")?))?.restore()?;
        *slot = Box::into_raw(Box::new(SmModel { inner }));
        Ok(())
    })
}

/// Writes a checkpoint file.
///
/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sm_model_save(model: *const SmModel, path: *const c_char) -> SmStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        Checkpoint::capture(&m.inner, None).save(Path::new(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// Accuracy of the model's final classifier over every sample of `dataset`.
///
/// # Safety
/// Handles must be live; `out_accuracy` writable.
#[no_mangle]
pub unsafe extern "C" fn sm_model_evaluate(
    model: *const SmModel,
    dataset: *const SmDataset,
    ablation: SmAblation,
    out_accuracy: *mut f64,
) -> SmStatus {
    guard(|| {
        let slot = out_arg(out_accuracy, "out_accuracy")?;
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let ds = dataset.as_ref().ok_or_else(|| null("dataset"))?;
        let dims = ds.inner.validate(m.inner.config.num_classes)?;
        m.inner.config.check_dims(&dims)?;
        let ablation = match ablation {
            SmAblation::None => Ablation::None,
            SmAblation::AddNoise => Ablation::AddNoise,
            SmAblation::UsingRemoved => Ablation::UsingRemoved,
        };
        *slot = evaluate(&m.inner, &ds.inner, ablation)?.overall;
        Ok(())
    })
}

/// Copies one modality's mask vector (`r` where kept, 0 where removed)
/// into `buf`. `out_len` always receives the required length; when `cap`
/// is too small nothing is copied and `BufferTooSmall` is returned.
///
/// # Safety
/// `model` must be a live handle, `buf` null or writable for `cap`
/// doubles, `out_len` writable.
#[no_mangle]
pub unsafe extern "C" fn sm_model_mask(
    model: *const SmModel,
    modality: SmModality,
    buf: *mut f64,
    cap: usize,
    out_len: *mut usize,
) -> SmStatus {
    guard(|| {
        let len_slot = out_arg(out_len, "out_len")?;
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let modality = match modality {
            SmModality::Text => Modality::Text,
            SmModality::Video => Modality::Video,
        };
        let v = m.inner.mask_state(modality).vector();
        *len_slot = v.len();
        if cap < v.len() {
            return Err(Fail(
                SmStatus::BufferTooSmall,
                format!("buffer holds {cap} values, mask has {}", v.len()),
            ));
        }
        if buf.is_null() {
            return Err(null("buf"));
        }
        std::slice::from_raw_parts_mut(buf, v.len()).copy_from_slice(&v);
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sm_model_free(model: *mut SmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
