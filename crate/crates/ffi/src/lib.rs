//! C ABI for the bitsplit engine.
//!
//! Other languages load a model file (trainable models are folded and
//! packed on load), query its dimensions, and run packed inference through
//! an opaque handle. Every function returns a status code; the message for
//! the most recent failure on the current thread is available via
//! `bs_last_error_message`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use bitsplit_core::model_io::{self, ModelFile};
use bitsplit_core::net::compile::{self, CompiledModel, CompiledOp};
use bitsplit_core::Error;

/// Status codes returned by every `bs_*` call.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum BsStatus {
    BsOk = 0,
    BsErrInvalidArgument = 1,
    BsErrInvalidState = 2,
    BsErrFormat = 3,
    BsErrIo = 4,
    BsErrNullPointer = 5,
    BsErrPanic = 6,
}

/// Opaque handle to a loaded, compiled model.
pub struct BsModel {
    compiled: CompiledModel,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let cleaned: String = msg.chars().filter(|&c| c != '\0').collect();
    LAST_ERROR.with(|e| {
        *e.borrow_mut() = CString::new(cleaned).unwrap_or_default();
    });
}

fn status_of(err: &Error) -> BsStatus {
    match err {
        Error::InvalidArgument(_) => BsStatus::BsErrInvalidArgument,
        Error::InvalidState(_) => BsStatus::BsErrInvalidState,
        Error::Format(_) => BsStatus::BsErrFormat,
        Error::Io(_) => BsStatus::BsErrIo,
    }
}

fn guarded(f: impl FnOnce() -> BsStatus + std::panic::UnwindSafe) -> BsStatus {
    match catch_unwind(f) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic");
            BsStatus::BsErrPanic
        }
    }
}

/// Message for the most recent failing call on this thread. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn bs_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Load a model file. Trainable-format files are folded and packed for
/// inference on load; compiled-format files load as-is. On success writes a
/// handle to `out`.
///
/// # Safety
/// `path` must be a valid NUL-terminated string; `out` must be a valid
/// pointer. The returned handle must be released with `bs_model_free`.
#[no_mangle]
pub unsafe extern "C" fn bs_model_load(path: *const c_char, out: *mut *mut BsModel) -> BsStatus {
    if path.is_null() || out.is_null() {
        set_error("null pointer argument");
        return BsStatus::BsErrNullPointer;
    }
    let path_str = match CStr::from_ptr(path).to_str() {
        Ok(s) => s.to_owned(),
        Err(_) => {
            set_error("path is not valid UTF-8");
            return BsStatus::BsErrInvalidArgument;
        }
    };
    guarded(AssertUnwindSafe(move || {
        let loaded = match model_io::load_any(Path::new(&path_str)) {
            Ok(m) => m,
            Err(e) => {
                set_error(&e.to_string());
                return status_of(&e);
            }
        };
        let compiled = match loaded {
            ModelFile::Compiled(c) => c,
            ModelFile::Trainable(model) => match compile::compile(&model) {
                Ok(c) => c,
                Err(e) => {
                    set_error(&e.to_string());
                    return status_of(&e);
                }
            },
        };
        *out = Box::into_raw(Box::new(BsModel { compiled }));
        BsStatus::BsOk
    }))
}

/// Release a handle obtained from `bs_model_load`. NULL is a no-op.
///
/// # Safety
/// `model` must be a handle returned by `bs_model_load`, released at most once.
#[no_mangle]
pub unsafe extern "C" fn bs_model_free(model: *mut BsModel) -> BsStatus {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
    BsStatus::BsOk
}

/// Number of output classes (logit count).
///
/// # Safety
/// `model` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn bs_model_num_classes(model: *const BsModel, out: *mut usize) -> BsStatus {
    if model.is_null() || out.is_null() {
        set_error("null pointer argument");
        return BsStatus::BsErrNullPointer;
    }
    *out = (*model).compiled.num_classes;
    BsStatus::BsOk
}

/// Flat input length when it is statically known (dense first layer);
/// writes 0 for convolutional models, whose spatial dims come from the
/// input itself.
///
/// # Safety
/// `model` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn bs_model_input_len(model: *const BsModel, out: *mut usize) -> BsStatus {
    if model.is_null() || out.is_null() {
        set_error("null pointer argument");
        return BsStatus::BsErrNullPointer;
    }
    let compiled = &(*model).compiled;
    *out = match compiled.ops.first() {
        Some(CompiledOp::Linear { w, .. }) => w.shape[1],
        _ => 0,
    };
    BsStatus::BsOk
}

/// Activation (k) and weight (n) bit counts of the compiled model.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn bs_model_bits(
    model: *const BsModel,
    k_out: *mut usize,
    n_out: *mut usize,
) -> BsStatus {
    if model.is_null() || k_out.is_null() || n_out.is_null() {
        set_error("null pointer argument");
        return BsStatus::BsErrNullPointer;
    }
    *k_out = (*model).compiled.k;
    *n_out = (*model).compiled.n;
    BsStatus::BsOk
}

/// Run packed inference on one sample. `input` holds `input_len` f32
/// values (row-major image or flat features); logits are written to
/// `out_logits`, which must hold at least `num_classes` values.
///
/// # Safety
/// `model`, `input`, and `out_logits` must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn bs_model_predict(
    model: *const BsModel,
    input: *const f32,
    input_len: usize,
    out_logits: *mut f32,
    logits_capacity: usize,
) -> BsStatus {
    if model.is_null() || input.is_null() || out_logits.is_null() {
        set_error("null pointer argument");
        return BsStatus::BsErrNullPointer;
    }
    let compiled = &(*model).compiled;
    if logits_capacity < compiled.num_classes {
        set_error("logits buffer too small");
        return BsStatus::BsErrInvalidArgument;
    }
    let sample = std::slice::from_raw_parts(input, input_len);
    let dst = std::slice::from_raw_parts_mut(out_logits, compiled.num_classes);
    guarded(AssertUnwindSafe(move || {
        match compiled.forward_sample(sample, &[input_len]) {
            Ok(logits) => {
                dst.copy_from_slice(&logits);
                BsStatus::BsOk
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    }))
}

/// Class index with the highest logit for one sample.
///
/// # Safety
/// `model`, `input`, and `out_class` must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn bs_model_classify(
    model: *const BsModel,
    input: *const f32,
    input_len: usize,
    out_class: *mut usize,
) -> BsStatus {
    if model.is_null() || input.is_null() || out_class.is_null() {
        set_error("null pointer argument");
        return BsStatus::BsErrNullPointer;
    }
    let compiled = &(*model).compiled;
    let sample = std::slice::from_raw_parts(input, input_len);
    guarded(AssertUnwindSafe(move || {
        match compiled.forward_sample(sample, &[input_len]) {
            Ok(logits) => {
                let mut best = 0usize;
                for (j, &v) in logits.iter().enumerate() {
                    if v > logits[best] {
                        best = j;
                    }
                }
                *out_class = best;
                BsStatus::BsOk
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    }))
}
