//! C ABI over `scsm-core`.
//!
//! Every fallible function returns an [`ScsmStatus`]; on failure the message is
//! kept per thread and read back with [`scsm_last_error_message`]. Handles are
//! opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use scsm_core::model::{Scsm, ScsmConfig as CoreConfig};
use scsm_core::{Error, Tensor};

/// Status codes. Zero is success.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScsmStatus {
    Ok = 0,
    Config = 1,
    Io = 2,
    Format = 3,
    Dimension = 4,
    Numeric = 5,
    Contract = 6,
    Incompatible = 7,
    NullPointer = 8,
    InvalidArgument = 9,
    Panic = 10,
}

/// Model configuration.
pub struct ScsmConfig(CoreConfig);

/// A model with its parameters.
pub struct ScsmModel(Scsm);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

struct Failure(ScsmStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Config(_) => ScsmStatus::Config,
            Error::Io { .. } => ScsmStatus::Io,
            Error::Format { .. } => ScsmStatus::Format,
            Error::Dimension(_) => ScsmStatus::Dimension,
            Error::Numeric(_) => ScsmStatus::Numeric,
            Error::Contract(_) => ScsmStatus::Contract,
            Error::Incompatible(_) => ScsmStatus::Incompatible,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(ScsmStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> ScsmStatus {
    let outcome = catch_unwind(AssertUnwindSafe(f))
        .unwrap_or_else(|_| Err(Failure(ScsmStatus::Panic, "internal panic".into())));
    let (status, msg) = match outcome {
        Ok(()) => (ScsmStatus::Ok, String::new()),
        Err(Failure(s, m)) => (s, m),
    };
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
    status
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(ScsmStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn store<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Length in bytes of the calling thread's last error message, without the NUL.
#[no_mangle]
pub extern "C" fn scsm_last_error_length() -> usize {
    LAST_ERROR.with(|e| e.borrow().len())
}

/// Copies the last error message into `buf` as a NUL-terminated string,
/// truncating to `cap - 1` bytes. Returns the full message length.
///
/// # Safety
/// `buf` must be null or valid for `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn scsm_last_error_message(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Static, NUL-terminated crate version.
#[no_mangle]
pub extern "C" fn scsm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `out` must be valid for one pointer write.
#[no_mangle]
pub unsafe extern "C" fn scsm_config_default(out: *mut *mut ScsmConfig) -> ScsmStatus {
    guard(|| store(out, ScsmConfig(CoreConfig::default())))
}

/// Sets one `key=value` entry, using the same keys as the text format.
///
/// # Safety
/// `config` must come from this library; `key` and `value` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn scsm_config_set(
    config: *mut ScsmConfig,
    key: *const c_char,
    value: *const c_char,
) -> ScsmStatus {
    guard(|| {
        let cfg = config.as_mut().ok_or_else(|| null("config"))?;
        cfg.0.set(text(key, "key")?, text(value, "value")?)?;
        Ok(())
    })
}

/// # Safety
/// `config` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn scsm_config_validate(config: *const ScsmConfig) -> ScsmStatus {
    guard(|| Ok(handle(config, "config")?.0.validate()?))
}

/// # Safety
/// `config` must be null or come from this library, and is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn scsm_config_free(config: *mut ScsmConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Builds a freshly initialised model. The configuration is copied.
///
/// # Safety
/// `config` must come from this library; `out` must be valid for one pointer write.
#[no_mangle]
pub unsafe extern "C" fn scsm_model_new(
    config: *const ScsmConfig,
    seed: u64,
    out: *mut *mut ScsmModel,
) -> ScsmStatus {
    guard(|| {
        let cfg = handle(config, "config")?;
        store(out, ScsmModel(Scsm::new(cfg.0.clone(), seed)?))
    })
}

/// # Safety
/// `path` must be NUL-terminated; `out` must be valid for one pointer write.
#[no_mangle]
pub unsafe extern "C" fn scsm_model_load(
    path: *const c_char,
    out: *mut *mut ScsmModel,
) -> ScsmStatus {
    guard(|| store(out, ScsmModel(Scsm::load(text(path, "path")?)?)))
}

/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn scsm_model_save(
    model: *const ScsmModel,
    path: *const c_char,
) -> ScsmStatus {
    guard(|| Ok(handle(model, "model")?.0.save(text(path, "path")?)?))
}

/// Input channels, height, width and class count of the model. Any output
/// pointer may be null.
///
/// # Safety
/// `model` must come from this library; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn scsm_model_shape(
    model: *const ScsmModel,
    channels: *mut usize,
    height: *mut usize,
    width: *mut usize,
    classes: *mut usize,
) -> ScsmStatus {
    guard(|| {
        let cfg = handle(model, "model")?.0.config();
        for (p, v) in [
            (channels, cfg.in_channels),
            (height, cfg.height),
            (width, cfg.width),
            (classes, cfg.classes),
        ] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Segments one `C×H×W` image given row-major in `image`, writing `H×W`
/// class indices to `labels`.
///
/// # Safety
/// `image` must be valid for `image_len` reads and `labels` for `labels_len` writes.
#[no_mangle]
pub unsafe extern "C" fn scsm_model_predict(
    model: *const ScsmModel,
    image: *const f64,
    image_len: usize,
    labels: *mut u32,
    labels_len: usize,
) -> ScsmStatus {
    guard(|| {
        let m = &handle(model, "model")?.0;
        if image.is_null() {
            return Err(null("image"));
        }
        if labels.is_null() {
            return Err(null("labels"));
        }
        let cfg = m.config();
        let (c, h, w) = (cfg.in_channels, cfg.height, cfg.width);
        if image_len != c * h * w || labels_len != h * w {
            return Err(Failure(
                ScsmStatus::Dimension,
                format!("buffers of {image_len} and {labels_len} for a {c}×{h}×{w} model"),
            ));
        }
        let data = std::slice::from_raw_parts(image, image_len).to_vec();
        let mask = m.predict(&Tensor::new(&[c, h, w], data)?)?;
        let out = std::slice::from_raw_parts_mut(labels, labels_len);
        for (o, &l) in out.iter_mut().zip(mask.labels()) {
            *o = l as u32;
        }
        Ok(())
    })
}

/// # Safety
/// `model` must be null or come from this library, and is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn scsm_model_free(model: *mut ScsmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
