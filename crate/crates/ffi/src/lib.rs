//! C ABI over the simulator.
//!
//! Handles are opaque pointers created by `*_new`/`*_load`/`*_run` functions and
//! released with the matching `*_free`. Every fallible call returns an
//! [`MtgcStatus`]; the message of the most recent failure on the calling thread is
//! available through [`mtgc_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use mtgc::analysis::{rounds_to_threshold, MetricOptions, MetricTrace, ThresholdMetric};
use mtgc::config::{load_config, parse_config, ExperimentSpec};
use mtgc::experiment::{prepare, run_experiment, run_seed, Prepared};
use mtgc::Error;

/// Result codes. The first four match the CLI exit statuses.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MtgcStatus {
    Ok = 0,
    Config = 1,
    Diverged = 2,
    Io = 3,
    NullArgument = 4,
    InvalidArgument = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// Which metric `mtgc_run_rounds_to_threshold` scans.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MtgcMetric {
    GradNormSq = 0,
    Loss = 1,
}

/// One metric row. Optional columns that were not recorded are NaN.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MtgcRecord {
    pub t: u64,
    pub e: u64,
    pub grad_norm_sq: f64,
    pub loss: f64,
    pub subopt: f64,
    pub client_drift: f64,
    pub group_drift: f64,
    pub delta1_sq: f64,
    pub delta2_sq_max: f64,
    pub z_sum_violation: f64,
    pub y_sum_violation: f64,
}

/// A validated experiment description with its instance built.
pub struct MtgcExperiment {
    spec: ExperimentSpec,
    prepared: Prepared,
}

/// Metric trace of one seed. A diverged run keeps the rows recorded before the failure.
pub struct MtgcRun {
    trace: MetricTrace,
    csv: CString,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

fn status_of(err: &Error) -> MtgcStatus {
    match err.exit_code() {
        2 => MtgcStatus::Diverged,
        3 => MtgcStatus::Io,
        _ => MtgcStatus::Config,
    }
}

fn fail(err: Error) -> MtgcStatus {
    let status = status_of(&err);
    set_error(err.to_string());
    status
}

fn guard(f: impl FnOnce() -> MtgcStatus) -> MtgcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => {
            set_error("panic inside mtgc");
            MtgcStatus::Panic
        }
    }
}

/// # Safety
/// `s` must be null or a valid NUL-terminated string.
unsafe fn str_arg<'a>(s: *const c_char, name: &str) -> Result<&'a str, MtgcStatus> {
    if s.is_null() {
        set_error(format!("{name} is null"));
        return Err(MtgcStatus::NullArgument);
    }
    CStr::from_ptr(s).to_str().map_err(|_| {
        set_error(format!("{name} is not valid UTF-8"));
        MtgcStatus::InvalidArgument
    })
}

fn build(spec: ExperimentSpec) -> Result<Box<MtgcExperiment>, MtgcStatus> {
    let prepared = prepare(&spec).map_err(fail)?;
    Ok(Box::new(MtgcExperiment { spec, prepared }))
}

/// Copies `text` plus a terminating NUL into `buf`. `needed` (optional) receives the
/// required capacity in bytes.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes; `needed` must be null or valid.
unsafe fn copy_out(text: &CStr, buf: *mut c_char, len: usize, needed: *mut usize) -> MtgcStatus {
    let bytes = text.to_bytes_with_nul();
    if !needed.is_null() {
        *needed = bytes.len();
    }
    if buf.is_null() || len < bytes.len() {
        set_error(format!("buffer of {len} bytes, {} needed", bytes.len()));
        return MtgcStatus::BufferTooSmall;
    }
    ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, bytes.len());
    MtgcStatus::Ok
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mtgc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message of the latest failure on this thread, or null. Valid until the next call
/// into the library from the same thread.
#[no_mangle]
pub extern "C" fn mtgc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Parses TOML config text and builds the instance.
///
/// # Safety
/// `toml` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mtgc_experiment_new(toml: *const c_char, out: *mut *mut MtgcExperiment) -> MtgcStatus {
    guard(|| {
        if out.is_null() {
            set_error("out is null");
            return MtgcStatus::NullArgument;
        }
        *out = ptr::null_mut();
        let text = match str_arg(toml, "toml") {
            Ok(t) => t,
            Err(s) => return s,
        };
        let spec = match parse_config(text) {
            Ok(s) => s,
            Err(e) => return fail(e),
        };
        match build(spec) {
            Ok(exp) => {
                *out = Box::into_raw(exp);
                MtgcStatus::Ok
            }
            Err(s) => s,
        }
    })
}

/// Loads a config file; relative dataset paths resolve against its directory.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mtgc_experiment_load(path: *const c_char, out: *mut *mut MtgcExperiment) -> MtgcStatus {
    guard(|| {
        if out.is_null() {
            set_error("out is null");
            return MtgcStatus::NullArgument;
        }
        *out = ptr::null_mut();
        let path = match str_arg(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        let spec = match load_config(path) {
            Ok(s) => s,
            Err(e) => return fail(e),
        };
        match build(spec) {
            Ok(exp) => {
                *out = Box::into_raw(exp);
                MtgcStatus::Ok
            }
            Err(s) => s,
        }
    })
}

/// # Safety
/// `exp` must be null or a handle from this library that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn mtgc_experiment_free(exp: *mut MtgcExperiment) {
    if !exp.is_null() {
        drop(Box::from_raw(exp));
    }
}

/// Writes the 16-hex-digit spec hash into `buf`.
///
/// # Safety
/// `exp` must be a live handle; `buf`/`needed` as in the buffer contract.
#[no_mangle]
pub unsafe extern "C" fn mtgc_experiment_spec_hash(
    exp: *const MtgcExperiment,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> MtgcStatus {
    guard(|| {
        let Some(exp) = exp.as_ref() else {
            set_error("experiment is null");
            return MtgcStatus::NullArgument;
        };
        let hash = CString::new(exp.spec.spec_hash()).expect("hex has no NUL");
        copy_out(&hash, buf, len, needed)
    })
}

/// Step size the instance resolved to (after `"auto"`), or NaN for a null handle.
///
/// # Safety
/// `exp` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mtgc_experiment_gamma(exp: *const MtgcExperiment) -> f64 {
    exp.as_ref().map_or(f64::NAN, |e| e.prepared.gamma)
}

/// Trains one seed in memory. On divergence the status is `Diverged` and `out` still
/// receives a run holding the partial trace.
///
/// # Safety
/// `exp` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mtgc_experiment_run_seed(
    exp: *const MtgcExperiment,
    seed: u64,
    out: *mut *mut MtgcRun,
) -> MtgcStatus {
    guard(|| {
        if out.is_null() {
            set_error("out is null");
            return MtgcStatus::NullArgument;
        }
        *out = ptr::null_mut();
        let Some(exp) = exp.as_ref() else {
            set_error("experiment is null");
            return MtgcStatus::NullArgument;
        };
        let metrics = MetricOptions {
            drift: exp.spec.metrics.drift,
            dissimilarity: exp.spec.metrics.dissimilarity,
            ..Default::default()
        };
        let result = run_seed(&exp.prepared, &metrics, seed);
        let csv = CString::new(result.trace.to_csv_string()).expect("csv has no NUL");
        *out = Box::into_raw(Box::new(MtgcRun {
            trace: result.trace,
            csv,
        }));
        match result.error {
            Some(e) => fail(e),
            None => MtgcStatus::Ok,
        }
    })
}

/// Runs every configured seed and writes the usual output directory. A null
/// `output_dir` keeps the configured one.
///
/// # Safety
/// `exp` must be a live handle; `output_dir` null or NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn mtgc_experiment_write(exp: *const MtgcExperiment, output_dir: *const c_char) -> MtgcStatus {
    guard(|| {
        let Some(exp) = exp.as_ref() else {
            set_error("experiment is null");
            return MtgcStatus::NullArgument;
        };
        let mut spec = exp.spec.clone();
        if !output_dir.is_null() {
            match str_arg(output_dir, "output_dir") {
                Ok(d) => spec.output_dir = PathBuf::from(d),
                Err(s) => return s,
            }
        }
        match run_experiment(&spec) {
            Ok(_) => MtgcStatus::Ok,
            Err(e) => fail(e),
        }
    })
}

/// # Safety
/// `run` must be null or a handle from this library that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn mtgc_run_free(run: *mut MtgcRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Number of metric rows, or 0 for a null handle.
///
/// # Safety
/// `run` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mtgc_run_len(run: *const MtgcRun) -> usize {
    run.as_ref().map_or(0, |r| r.trace.records.len())
}

/// # Safety
/// `run` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mtgc_run_record(run: *const MtgcRun, index: usize, out: *mut MtgcRecord) -> MtgcStatus {
    guard(|| {
        let (Some(run), false) = (run.as_ref(), out.is_null()) else {
            set_error("run or out is null");
            return MtgcStatus::NullArgument;
        };
        let Some(r) = run.trace.records.get(index) else {
            set_error(format!("row {index} of {}", run.trace.records.len()));
            return MtgcStatus::InvalidArgument;
        };
        let opt = |v: Option<f64>| v.unwrap_or(f64::NAN);
        *out = MtgcRecord {
            t: r.t as u64,
            e: r.e as u64,
            grad_norm_sq: r.grad_norm_sq,
            loss: r.loss,
            subopt: opt(r.subopt),
            client_drift: opt(r.client_drift),
            group_drift: opt(r.group_drift),
            delta1_sq: opt(r.delta1_sq),
            delta2_sq_max: opt(r.delta2_sq_max),
            z_sum_violation: r.z_sum_violation,
            y_sum_violation: r.y_sum_violation,
        };
        MtgcStatus::Ok
    })
}

/// Copies the trace in `metrics.csv` format into `buf`.
///
/// # Safety
/// `run` must be a live handle; `buf`/`needed` as in the buffer contract.
#[no_mangle]
pub unsafe extern "C" fn mtgc_run_metrics_csv(
    run: *const MtgcRun,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> MtgcStatus {
    guard(|| {
        let Some(run) = run.as_ref() else {
            set_error("run is null");
            return MtgcStatus::NullArgument;
        };
        copy_out(&run.csv, buf, len, needed)
    })
}

/// First global round whose metric is at or below `threshold`; writes -1 when the
/// trace never gets there.
///
/// # Safety
/// `run` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mtgc_run_rounds_to_threshold(
    run: *const MtgcRun,
    threshold: f64,
    metric: MtgcMetric,
    out: *mut i64,
) -> MtgcStatus {
    guard(|| {
        let (Some(run), false) = (run.as_ref(), out.is_null()) else {
            set_error("run or out is null");
            return MtgcStatus::NullArgument;
        };
        let metric = match metric {
            MtgcMetric::GradNormSq => ThresholdMetric::Grad,
            MtgcMetric::Loss => ThresholdMetric::Loss,
        };
        *out = rounds_to_threshold(&run.trace, threshold, metric).map_or(-1, |r| r as i64);
        MtgcStatus::Ok
    })
}
