//! C ABI over the translation engine: opaque model handles, status codes and
//! a thread-local last-error message.
//!
//! Strings crossing the boundary are NUL-terminated UTF-8. Strings returned
//! by the library must be released with `mn_string_free`.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use mention_nmt::decode::DecodeConfig;
use mention_nmt::model::{load_checkpoint, read_manifest, Checkpoint, MaskMode};
use mention_nmt::tensor::DType;
use mention_nmt::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Input = 4,
    Incompatible = 5,
    Contract = 6,
    Panic = 7,
    Internal = 8,
}

/// A loaded checkpoint with its BPE model and vocabularies.
pub struct MnModel {
    inner: Inner,
}

enum Inner {
    F32(Checkpoint<f32>),
    F64(Checkpoint<f64>),
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> MnStatus {
    match e {
        Error::Io { .. } => MnStatus::Io,
        Error::Input(_) | Error::Vocab(_) | Error::Alignment(_) | Error::Json(_) => MnStatus::Input,
        Error::Incompatible(_) => MnStatus::Incompatible,
        Error::Contract(_) => MnStatus::Contract,
        _ => MnStatus::Internal,
    }
}

/// Runs `f`, mapping errors and panics to status codes.
fn guard(f: impl FnOnce() -> Result<(), (MnStatus, String)>) -> MnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            MnStatus::Ok
        }
        Ok(Err((s, msg))) => {
            set_error(&msg);
            s
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(&format!("panic: {msg}"));
            MnStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (MnStatus, String) {
    (status_of(&e), e.to_string())
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, (MnStatus, String)> {
    if p.is_null() {
        return Err((MnStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (MnStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

fn null(what: &str) -> (MnStatus, String) {
    (MnStatus::NullPointer, format!("{what} is null"))
}

/// Message for the last failed call on this thread; empty after success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn mn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn mn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint directory. On success `*out` owns a new handle.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mn_model_load(path: *const c_char, out: *mut *mut MnModel) -> MnStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let p = Path::new(read_str(path, "path")?);
        let inner = match read_manifest(p).map_err(lib_err)?.dtype {
            DType::F32 => Inner::F32(load_checkpoint(p).map_err(lib_err)?),
            DType::F64 => Inner::F64(load_checkpoint(p).map_err(lib_err)?),
        };
        *out = Box::into_raw(Box::new(MnModel { inner }));
        Ok(())
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `model` must come from `mn_model_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mn_model_free(model: *mut MnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Writes 1 to `*out` for a mention-attention model, 0 for a baseline.
///
/// # Safety
/// Both pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn mn_model_is_mention(model: *const MnModel, out: *mut c_int) -> MnStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = match &m.inner {
            Inner::F32(c) => c.model.is_mention(),
            Inner::F64(c) => c.model.is_mention(),
        } as c_int;
        Ok(())
    })
}

/// Translates one whitespace-tokenized sentence with beam search and the
/// predicted mention mask. `beam` 1 is greedy. On success `*out` holds a
/// string to release with `mn_string_free`.
///
/// # Safety
/// `model` must be a live handle, `src` a NUL-terminated string, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn mn_translate(
    model: *const MnModel,
    src: *const c_char,
    beam: u32,
    out: *mut *mut c_char,
) -> MnStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let src = read_str(src, "src")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = DecodeConfig {
            beam: beam as usize,
            ..DecodeConfig::default()
        };
        let text = match &m.inner {
            Inner::F32(c) => c.translate_line(src, None, &cfg),
            Inner::F64(c) => c.translate_line(src, None, &cfg),
        }
        .map_err(lib_err)?
        .0;
        *out = CString::new(text)
            .map_err(|_| (MnStatus::Internal, "output contains NUL".into()))?
            .into_raw();
        Ok(())
    })
}

/// Teacher-forced log-probability of `tgt` (followed by EOS) given `src`.
///
/// # Safety
/// `model` must be a live handle, strings NUL-terminated, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn mn_score(
    model: *const MnModel,
    src: *const c_char,
    tgt: *const c_char,
    out: *mut f64,
) -> MnStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let src = read_str(src, "src")?;
        let tgt = read_str(tgt, "tgt")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let mode = MaskMode::Predicted { threshold: 0.5 };
        *out = match &m.inner {
            Inner::F32(c) => c.score_line(src, tgt, &mode),
            Inner::F64(c) => c.score_line(src, tgt, &mode),
        }
        .map_err(lib_err)?;
        Ok(())
    })
}

/// Releases a string returned by the library; null is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mn_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
