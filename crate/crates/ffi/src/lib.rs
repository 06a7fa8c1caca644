//! C ABI over the forecaster.
//!
//! Models are opaque heap handles created by `asgm_model_load` and released
//! with `asgm_model_free`. Every call returns an `AsgmStatus`; on failure
//! `asgm_last_error` describes the most recent error on the calling thread.
//! Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use asgmamba::checkpoint::Checkpoint;
use asgmamba::{spectral, Error, Tensor};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AsgmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Io = 4,
    Data = 5,
    Numerical = 6,
    Panic = 7,
}

/// Opaque model handle.
pub struct AsgmModel {
    inner: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(e: &Error) -> AsgmStatus {
    match e {
        Error::Shape { .. } | Error::Axis { .. } => AsgmStatus::Shape,
        Error::InvalidArgument { .. } | Error::Config(_) => AsgmStatus::InvalidArgument,
        Error::Io(_) => AsgmStatus::Io,
        Error::Csv { .. } | Error::Data(_) | Error::Checkpoint(_) => AsgmStatus::Data,
        Error::Numerical(_) | Error::TapeConsumed | Error::NonScalarLoss(_) => AsgmStatus::Numerical,
    }
}

struct Fail(AsgmStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(AsgmStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> AsgmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            AsgmStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            AsgmStatus::Panic
        }
    }
}

/// Loads a checkpoint file. On success `*out` owns a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn asgm_model_load(path: *const c_char, out: *mut *mut AsgmModel) -> AsgmStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Fail(AsgmStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let inner = Checkpoint::load(path)?;
        *out = Box::into_raw(Box::new(AsgmModel { inner }));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from `asgm_model_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn asgm_model_free(model: *mut AsgmModel) {
    if !model.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(Box::from_raw(model))));
    }
}

/// Look-back, horizon and variate count of a model. Any out pointer may
/// be null.
///
/// # Safety
/// `model` must be a live handle; non-null out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn asgm_model_dims(
    model: *const AsgmModel,
    lookback: *mut usize,
    horizon: *mut usize,
    variates: *mut usize,
) -> AsgmStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let c = &m.inner.model.config;
        for (p, v) in [(lookback, c.lookback), (horizon, c.horizon), (variates, c.variates)] {
            if let Some(p) = p.as_mut() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Scalar parameter count of a model.
///
/// # Safety
/// `model` must be a live handle and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn asgm_model_param_count(model: *const AsgmModel, out: *mut usize) -> AsgmStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = m.inner.model.param_count();
        Ok(())
    })
}

/// Forecasts `batch` windows. `input` holds `batch × lookback × variates`
/// values and `output` receives `batch × horizon × variates`, both
/// row-major on the scale of the training data; the stored standardization
/// is applied and undone around the model.
///
/// # Safety
/// `input` and `output` must point to at least `input_len` and
/// `output_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn asgm_model_forecast(
    model: *const AsgmModel,
    input: *const f64,
    input_len: usize,
    batch: usize,
    output: *mut f64,
    output_len: usize,
) -> AsgmStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if input.is_null() {
            return Err(null("input"));
        }
        if output.is_null() {
            return Err(null("output"));
        }
        let c = &m.inner.model.config;
        let (want_in, want_out) = (batch * c.lookback * c.variates, batch * c.horizon * c.variates);
        if batch == 0 || input_len != want_in || output_len != want_out {
            return Err(Fail(
                AsgmStatus::Shape,
                format!(
                    "expected input {want_in} and output {want_out} values for batch {batch}, got {input_len} and {output_len}"
                ),
            ));
        }
        let mut x = std::slice::from_raw_parts(input, input_len).to_vec();
        if let Some(s) = &m.inner.scaler {
            s.transform(&mut x);
        }
        let x = Tensor::new(vec![batch, c.lookback, c.variates], x)?;
        let mut y = m.inner.model.predict(&x)?.into_data();
        if let Some(s) = &m.inner.scaler {
            s.inverse(&mut y);
        }
        std::slice::from_raw_parts_mut(output, output_len).copy_from_slice(&y);
        Ok(())
    })
}

/// Band-energy shares of one patch (length a power of two) into `out`,
/// which must hold `k_freq` doubles.
///
/// # Safety
/// `patch` must point to `len` doubles and `out` to `k_freq` doubles.
#[no_mangle]
pub unsafe extern "C" fn asgm_spectral_descriptor(
    patch: *const f64,
    len: usize,
    k_freq: usize,
    out: *mut f64,
) -> AsgmStatus {
    guard(|| {
        if patch.is_null() {
            return Err(null("patch"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let d = spectral::descriptor(std::slice::from_raw_parts(patch, len), k_freq)?;
        std::slice::from_raw_parts_mut(out, k_freq).copy_from_slice(d.shares());
        Ok(())
    })
}

/// Message of the last failed call on this thread, or null. Valid until
/// the next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn asgm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// NUL-terminated library version.
#[no_mangle]
pub extern "C" fn asgm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
