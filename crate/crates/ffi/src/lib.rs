//! C ABI over the `fedlora` simulator.
//!
//! Every function returns a [`FedloraStatus`]; on failure the message is
//! available from [`fedlora_last_error`] on the same thread. Objects are
//! opaque handles released with their matching `_free` function, and strings
//! handed out by the library are released with [`fedlora_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use fedlora::config::{config_from_value, parse_override};
use fedlora::federation::{run_experiment, similarity_weights};
use fedlora::math::frob_distance;
use fedlora::{write_report, Error, ErrorKind, ExperimentConfig, Matrix, Report};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FedloraStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidString = 2,
    Config = 3,
    Data = 4,
    Runtime = 5,
    OutOfRange = 6,
    Panic = 7,
}

/// Validated experiment configuration.
pub struct FedloraConfig {
    inner: ExperimentConfig,
}

/// Result of a finished experiment.
pub struct FedloraReport {
    inner: Report,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let text = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = text);
}

fn fail(status: FedloraStatus, message: &str) -> FedloraStatus {
    set_error(message);
    status
}

fn from_error(e: &Error) -> FedloraStatus {
    let status = match e.kind() {
        ErrorKind::Config => FedloraStatus::Config,
        ErrorKind::Data => FedloraStatus::Data,
        ErrorKind::Runtime => FedloraStatus::Runtime,
    };
    fail(status, &e.to_string())
}

fn guard(f: impl FnOnce() -> FedloraStatus) -> FedloraStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => {
            if s == FedloraStatus::Ok {
                set_error("");
            }
            s
        }
        Err(_) => fail(FedloraStatus::Panic, "internal panic"),
    }
}

unsafe fn read_str<'a>(p: *const c_char) -> Result<&'a str, FedloraStatus> {
    if p.is_null() {
        return Err(fail(FedloraStatus::NullPointer, "null string argument"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(FedloraStatus::InvalidString, "string argument is not UTF-8"))
}

fn into_c_string(s: String) -> *mut c_char {
    CString::new(s).map_or(ptr::null_mut(), CString::into_raw)
}

macro_rules! try_status {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(s) => return s,
        }
    };
}

macro_rules! non_null {
    ($($p:ident),+) => {
        $(if $p.is_null() {
            return fail(FedloraStatus::NullPointer, concat!("`", stringify!($p), "` is null"));
        })+
    };
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn fedlora_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fedlora_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Parses and validates a JSON configuration document.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn fedlora_config_from_json(
    json: *const c_char,
    out: *mut *mut FedloraConfig,
) -> FedloraStatus {
    guard(|| {
        non_null!(out);
        let text = try_status!(read_str(json));
        let doc: serde_json::Value = match serde_json::from_str(text) {
            Ok(v) => v,
            Err(e) => return fail(FedloraStatus::Config, &format!("config: {e}")),
        };
        match config_from_value(doc, &[]) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(FedloraConfig { inner }));
                FedloraStatus::Ok
            }
            Err(e) => from_error(&e),
        }
    })
}

/// Applies one `key.path=value` override; the config is unchanged on failure.
///
/// # Safety
/// `config` must come from [`fedlora_config_from_json`]; `assignment` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn fedlora_config_set(
    config: *mut FedloraConfig,
    assignment: *const c_char,
) -> FedloraStatus {
    guard(|| {
        non_null!(config);
        let text = try_status!(read_str(assignment));
        let cfg = &mut *config;
        let update = parse_override(text).and_then(|o| config_from_value(cfg.inner.to_json(), &[o]));
        match update {
            Ok(inner) => {
                cfg.inner = inner;
                FedloraStatus::Ok
            }
            Err(e) => from_error(&e),
        }
    })
}

/// Fully defaulted configuration as a JSON string; free with [`fedlora_string_free`].
///
/// # Safety
/// `config` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fedlora_config_to_json(
    config: *const FedloraConfig,
    out: *mut *mut c_char,
) -> FedloraStatus {
    guard(|| {
        non_null!(config, out);
        *out = into_c_string((&*config).inner.to_json().to_string());
        FedloraStatus::Ok
    })
}

/// # Safety
/// `config` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fedlora_config_free(config: *mut FedloraConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Runs the experiment described by `config`; writes nothing to disk.
///
/// # Safety
/// `config` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fedlora_run(
    config: *const FedloraConfig,
    out: *mut *mut FedloraReport,
) -> FedloraStatus {
    guard(|| {
        non_null!(config, out);
        match run_experiment(&(&*config).inner) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(FedloraReport { inner }));
                FedloraStatus::Ok
            }
            Err(e) => from_error(&e),
        }
    })
}

/// Mean of the per-client final test accuracies.
///
/// # Safety
/// `report` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fedlora_report_mean_accuracy(
    report: *const FedloraReport,
    out: *mut f64,
) -> FedloraStatus {
    guard(|| {
        non_null!(report, out);
        *out = (&*report).inner.mean_final_accuracy;
        FedloraStatus::Ok
    })
}

/// # Safety
/// `report` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fedlora_report_client_count(
    report: *const FedloraReport,
    out: *mut usize,
) -> FedloraStatus {
    guard(|| {
        non_null!(report, out);
        *out = (&*report).inner.final_test_accuracies.len();
        FedloraStatus::Ok
    })
}

/// Final test accuracy of client `index`.
///
/// # Safety
/// `report` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fedlora_report_client_accuracy(
    report: *const FedloraReport,
    index: usize,
    out: *mut f64,
) -> FedloraStatus {
    guard(|| {
        non_null!(report, out);
        match (&*report).inner.final_test_accuracies.get(index) {
            Some(&a) => {
                *out = a;
                FedloraStatus::Ok
            }
            None => fail(FedloraStatus::OutOfRange, &format!("no client {index}")),
        }
    })
}

/// The `report.json` document; free with [`fedlora_string_free`].
///
/// # Safety
/// `report` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fedlora_report_to_json(
    report: *const FedloraReport,
    out: *mut *mut c_char,
) -> FedloraStatus {
    guard(|| {
        non_null!(report, out);
        *out = into_c_string(fedlora::metrics::report_json(&(&*report).inner));
        FedloraStatus::Ok
    })
}

/// Writes the report files into `dir`, creating it if needed.
///
/// # Safety
/// `report` must be a live handle; `dir` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn fedlora_report_write(
    report: *const FedloraReport,
    dir: *const c_char,
) -> FedloraStatus {
    guard(|| {
        non_null!(report);
        let dir = try_status!(read_str(dir));
        match write_report(&(&*report).inner, Path::new(dir)) {
            Ok(_) => FedloraStatus::Ok,
            Err(e) => from_error(&e),
        }
    })
}

/// # Safety
/// `report` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fedlora_report_free(report: *mut FedloraReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// # Safety
/// `s` must be null or a string returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fedlora_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Similarity weights from an `n × n` row-major distance matrix; `out`
/// receives `n × n` row-major weights.
///
/// # Safety
/// `distances` must point to `n·n` readable doubles and `out` to `n·n` writable ones.
#[no_mangle]
pub unsafe extern "C" fn fedlora_similarity_weights(
    distances: *const f64,
    n: usize,
    lambda: f64,
    epsilon: f64,
    out: *mut f64,
) -> FedloraStatus {
    guard(|| {
        non_null!(distances, out);
        if !(0.0..=1.0).contains(&lambda) {
            return fail(FedloraStatus::Config, &format!("lambda {lambda} outside [0, 1]"));
        }
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return fail(FedloraStatus::Config, &format!("epsilon {epsilon} must be > 0"));
        }
        let Some(len) = n.checked_mul(n) else {
            return fail(FedloraStatus::OutOfRange, "n·n overflows");
        };
        let d = std::slice::from_raw_parts(distances, len).to_vec();
        let result = Matrix::new(n, n, d).and_then(|m| similarity_weights(&m, lambda, epsilon));
        match result {
            Ok(s) => {
                std::slice::from_raw_parts_mut(out, len).copy_from_slice(s.s.as_slice());
                FedloraStatus::Ok
            }
            Err(e) => from_error(&e),
        }
    })
}

/// Frobenius distance between two row-major `rows × cols` matrices.
///
/// # Safety
/// `a` and `b` must each point to `rows·cols` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fedlora_frob_distance(
    a: *const f64,
    b: *const f64,
    rows: usize,
    cols: usize,
    out: *mut f64,
) -> FedloraStatus {
    guard(|| {
        non_null!(a, b, out);
        let Some(len) = rows.checked_mul(cols) else {
            return fail(FedloraStatus::OutOfRange, "rows·cols overflows");
        };
        let ma = Matrix::new(rows, cols, std::slice::from_raw_parts(a, len).to_vec());
        let mb = Matrix::new(rows, cols, std::slice::from_raw_parts(b, len).to_vec());
        match ma.and_then(|ma| mb.and_then(|mb| frob_distance(&ma, &mb))) {
            Ok(d) => {
                *out = d;
                FedloraStatus::Ok
            }
            Err(e) => from_error(&e),
        }
    })
}
