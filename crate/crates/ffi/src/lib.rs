//! C ABI over `ssmlab`.
//!
//! Models are opaque handles created by `ssmlab_model_new` or
//! `ssmlab_model_load` and released with `ssmlab_model_free`. Every fallible
//! call returns an [`SsmlabStatus`]; on failure a message is available from
//! `ssmlab_last_error` on the same thread. Panics are caught at the boundary
//! and reported as `SSMLAB_STATUS_PANIC`.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use ssmlab::evaluator::Scorer;
use ssmlab::kernellab::{extrapolation_error, fit_kernel, FitMethod, MemoryKernel, Upper};
use ssmlab::models::{load_checkpoint, save_checkpoint, LanguageModel, ModelConfig};
use ssmlab::ndcore::Precision;
use ssmlab::stability::{hidden_bound, max_safe_decay, Horizon, StabilityBudget};
use ssmlab::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SsmlabStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Overflow = 4,
    Unsupported = 5,
    Checkpoint = 6,
    Io = 7,
    Config = 8,
    Panic = 9,
}

/// Opaque model handle.
pub struct SsmlabModel {
    inner: LanguageModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Vec<u8>> = const { RefCell::new(Vec::new()) };
}

fn set_error(msg: &str) {
    LAST_ERROR.with(|e| {
        let mut e = e.borrow_mut();
        e.clear();
        e.extend_from_slice(msg.as_bytes());
    });
}

fn status_of(err: &Error) -> SsmlabStatus {
    match err {
        Error::Shape { .. } => SsmlabStatus::Shape,
        Error::Overflow { .. } => SsmlabStatus::Overflow,
        Error::Unsupported(_) => SsmlabStatus::Unsupported,
        Error::Checkpoint { .. } | Error::CheckpointVersion { .. } => SsmlabStatus::Checkpoint,
        Error::Io(_) => SsmlabStatus::Io,
        Error::Config { .. } => SsmlabStatus::Config,
        _ => SsmlabStatus::InvalidArgument,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (SsmlabStatus, String)>) -> SsmlabStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SsmlabStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("panic inside ssmlab");
            SsmlabStatus::Panic
        }
    }
}

fn lib<T>(r: ssmlab::Result<T>) -> Result<T, (SsmlabStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (SsmlabStatus, String) {
    (SsmlabStatus::NullPointer, format!("{what} is null"))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, (SsmlabStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (SsmlabStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn model_ref<'a>(m: *const SsmlabModel) -> Result<&'a LanguageModel, (SsmlabStatus, String)> {
    m.as_ref().map(|m| &m.inner).ok_or_else(|| null("model"))
}

unsafe fn write_out<T>(out: *mut T, v: T, what: &str) -> Result<(), (SsmlabStatus, String)> {
    if out.is_null() {
        return Err(null(what));
    }
    *out = v;
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ssmlab_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length in bytes.
#[no_mangle]
pub unsafe extern "C" fn ssmlab_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = e.len().min(len - 1);
            std::ptr::copy_nonoverlapping(e.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        e.len()
    })
}

/// Creates a freshly initialised model from a preset (`"tiny"` or `"small"`).
#[no_mangle]
pub unsafe extern "C" fn ssmlab_model_new(preset: *const c_char, seed: u64, out: *mut *mut SsmlabModel) -> SsmlabStatus {
    guard(|| {
        let name = c_str(preset, "preset")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = lib(ModelConfig::preset(name).and_then(|c| LanguageModel::new(c, seed)))?;
        *out = Box::into_raw(Box::new(SsmlabModel { inner }));
        Ok(())
    })
}

/// Loads a checkpoint file.
#[no_mangle]
pub unsafe extern "C" fn ssmlab_model_load(path: *const c_char, out: *mut *mut SsmlabModel) -> SsmlabStatus {
    guard(|| {
        let p = PathBuf::from(c_str(path, "path")?);
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = lib(load_checkpoint(&p))?.model;
        *out = Box::into_raw(Box::new(SsmlabModel { inner }));
        Ok(())
    })
}

/// Saves a model as a 64-bit checkpoint.
#[no_mangle]
pub unsafe extern "C" fn ssmlab_model_save(model: *const SsmlabModel, path: *const c_char) -> SsmlabStatus {
    guard(|| {
        let m = model_ref(model)?;
        let p = PathBuf::from(c_str(path, "path")?);
        lib(save_checkpoint(&p, m, &serde_json::json!({}), Precision::F64))
    })
}

/// Releases a model; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn ssmlab_model_free(model: *mut SsmlabModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

#[no_mangle]
pub unsafe extern "C" fn ssmlab_model_num_params(model: *const SsmlabModel, out: *mut u64) -> SsmlabStatus {
    guard(|| {
        let m = model_ref(model)?;
        write_out(out, m.num_params() as u64, "out")
    })
}

/// Per-layer hidden state size.
#[no_mangle]
pub unsafe extern "C" fn ssmlab_model_state_size(model: *const SsmlabModel, out: *mut u64) -> SsmlabStatus {
    guard(|| {
        let m = model_ref(model)?;
        write_out(out, m.config().state_size() as u64, "out")
    })
}

/// Scores one byte sequence from a zero state: `out_nll[i]` is the negative
/// log-likelihood (nats) of `tokens[i + 1]` given `tokens[..=i]`.
/// `out_nll` must hold `len - 1` values.
#[no_mangle]
pub unsafe extern "C" fn ssmlab_model_score(model: *const SsmlabModel, tokens: *const u8, len: usize, out_nll: *mut f64) -> SsmlabStatus {
    guard(|| {
        let m = model_ref(model)?;
        if tokens.is_null() || out_nll.is_null() {
            return Err(null("tokens or out_nll"));
        }
        if len < 2 {
            return Err((SsmlabStatus::InvalidArgument, "need at least two tokens".into()));
        }
        let t = std::slice::from_raw_parts(tokens, len);
        let inputs: Vec<usize> = t[..len - 1].iter().map(|&b| b as usize).collect();
        let targets: Vec<usize> = t[1..].iter().map(|&b| b as usize).collect();
        let (nll, _) = lib(m.score_chunk(&inputs, &targets, 1, &m.initial_state(1)))?;
        std::slice::from_raw_parts_mut(out_nll, len - 1).copy_from_slice(&nll);
        Ok(())
    })
}

/// Largest decay keeping `|h|_∞ ≤ max_value` for all time; `feasible` is
/// false when no decay does.
#[no_mangle]
pub unsafe extern "C" fn ssmlab_max_safe_decay(
    max_value: f64,
    u_norm1: f64,
    x_sup: f64,
    h0_inf: f64,
    out_lambda: *mut f64,
    out_feasible: *mut bool,
) -> SsmlabStatus {
    guard(|| {
        let b = StabilityBudget {
            max_value,
            lambda: 0.0,
            u_norm1,
            x_sup,
            h0_inf,
        };
        let s = lib(max_safe_decay(&b))?;
        write_out(out_lambda, s.lambda_star, "out_lambda")?;
        write_out(out_feasible, s.feasible, "out_feasible")
    })
}

/// Bound on `|h_T|_∞`; `steps = 0` means an infinite horizon.
#[no_mangle]
pub unsafe extern "C" fn ssmlab_hidden_bound(lambda: f64, u_norm1: f64, x_sup: f64, h0_inf: f64, steps: u64, out: *mut f64) -> SsmlabStatus {
    guard(|| {
        let b = StabilityBudget {
            max_value: f64::INFINITY,
            lambda,
            u_norm1,
            x_sup,
            h0_inf,
        };
        let h = if steps == 0 { Horizon::Infinite } else { Horizon::Steps(steps) };
        write_out(out, lib(hidden_bound(&b, h))?, "out")
    })
}

/// Fits `m` exponentials to `target` on `[0, window]` and returns
/// `∫_window^horizon |ρ - ρ̂|`; a non-finite `horizon` means infinity.
#[no_mangle]
pub unsafe extern "C" fn ssmlab_kernel_extrapolation_error(
    target: *const c_char,
    m: usize,
    window: f64,
    horizon: f64,
    out: *mut f64,
) -> SsmlabStatus {
    guard(|| {
        let k = lib(MemoryKernel::parse(c_str(target, "target")?))?;
        let fit = lib(fit_kernel(&k, m, window, 40 * m.max(10), FitMethod::FixedRates))?;
        let upper = if horizon.is_finite() { Upper::At(horizon) } else { Upper::Infinity };
        let e = lib(extrapolation_error(&fit, &k, window, upper, 200_000))?;
        write_out(out, e.extrapolation, "out")
    })
}
