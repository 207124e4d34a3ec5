//! C ABI over `fcil-core`.
//!
//! Every function returns an [`FcilStatus`]; results come back through out
//! parameters. Handles are opaque and owned by the caller until passed to the
//! matching `*_free`. Text crosses the boundary only as caller-provided
//! NUL-terminated input or caller-owned output buffers, so no string needs to
//! be freed by the caller. After a non-OK status, [`fcil_last_error`] copies
//! a message for the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use fcil_core::config::ExperimentConfig;
use fcil_core::federation::{prototype_reweight, run_experiment, ClientUpload, ExperimentRecord};
use fcil_core::numkit::Vector;
use fcil_core::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FcilStatus {
    Ok = 0,
    /// A required pointer argument was NULL.
    NullArgument = 1,
    /// Input text was not valid UTF-8.
    InvalidUtf8 = 2,
    /// The configuration failed to parse or validate.
    Config = 3,
    /// The experiment or computation failed.
    Runtime = 4,
    /// Reading or writing a file failed.
    Io = 5,
    /// An index was outside the valid range.
    OutOfRange = 6,
    /// The output buffer is too small; the required size was reported.
    BufferTooSmall = 7,
    /// A Rust panic was caught at the boundary.
    Panic = 8,
}

/// Opaque experiment configuration.
pub struct FcilConfig {
    inner: ExperimentConfig,
}

/// Opaque result of a finished experiment.
pub struct FcilExperiment {
    record: ExperimentRecord,
    json: String,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(e: &Error) -> FcilStatus {
    match e {
        Error::Config(_) => FcilStatus::Config,
        Error::Io { .. } => FcilStatus::Io,
        _ => FcilStatus::Runtime,
    }
}

fn fail(e: Error) -> FcilStatus {
    let s = status_of(&e);
    set_error(e.to_string());
    s
}

/// Runs `f` with panics converted to [`FcilStatus::Panic`].
fn guard(f: impl FnOnce() -> FcilStatus) -> FcilStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => {
            if s == FcilStatus::Ok {
                set_error("");
            }
            s
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            FcilStatus::Panic
        }
    }
}

unsafe fn read_str<'a>(p: *const c_char) -> Result<&'a str, FcilStatus> {
    if p.is_null() {
        set_error("NULL string argument");
        return Err(FcilStatus::NullArgument);
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        set_error("argument is not valid UTF-8");
        FcilStatus::InvalidUtf8
    })
}

/// Copies `text` plus a NUL into `buf`. `needed` (if non-NULL) receives the
/// byte count including the NUL. A NULL `buf` with `cap == 0` only queries.
unsafe fn write_text(text: &str, buf: *mut c_char, cap: usize, needed: *mut usize) -> FcilStatus {
    let n = text.len() + 1;
    if !needed.is_null() {
        *needed = n;
    }
    if buf.is_null() {
        return if cap == 0 {
            FcilStatus::Ok
        } else {
            set_error("NULL buffer with nonzero capacity");
            FcilStatus::NullArgument
        };
    }
    if cap < n {
        set_error(format!("buffer holds {cap} bytes, {n} needed"));
        return FcilStatus::BufferTooSmall;
    }
    ptr::copy_nonoverlapping(text.as_ptr(), buf.cast::<u8>(), text.len());
    *buf.add(text.len()) = 0;
    FcilStatus::Ok
}

macro_rules! non_null {
    ($($p:expr),+) => {
        if $($p.is_null())||+ {
            set_error("NULL pointer argument");
            return FcilStatus::NullArgument;
        }
    };
}

/// Copies the calling thread's last error message (empty after success).
///
/// # Safety
/// `buf` must be NULL or point to `cap` writable bytes; `needed` must be NULL
/// or point to a writable `size_t`.
#[no_mangle]
pub unsafe extern "C" fn fcil_last_error(buf: *mut c_char, cap: usize, needed: *mut usize) -> FcilStatus {
    let msg = LAST_ERROR.with(|e| e.borrow().clone());
    write_text(&msg, buf, cap, needed)
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fcil_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Parses and validates a TOML configuration.
///
/// # Safety
/// `toml` must be a NUL-terminated string; `out` must be a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn fcil_config_from_toml(toml: *const c_char, out: *mut *mut FcilConfig) -> FcilStatus {
    guard(|| {
        non_null!(out);
        let text = match read_str(toml) {
            Ok(t) => t,
            Err(s) => return s,
        };
        match ExperimentConfig::from_toml(text) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(FcilConfig { inner }));
                FcilStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Default synthetic configuration with the given seed.
///
/// # Safety
/// `out` must be a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn fcil_config_default(seed: u64, out: *mut *mut FcilConfig) -> FcilStatus {
    guard(|| {
        non_null!(out);
        *out = Box::into_raw(Box::new(FcilConfig {
            inner: ExperimentConfig::synthetic(seed),
        }));
        FcilStatus::Ok
    })
}

/// Applies one `key=value` override (value in TOML syntax). The config is
/// unchanged on failure.
///
/// # Safety
/// `config` must be a live handle; `key_value` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn fcil_config_set(config: *mut FcilConfig, key_value: *const c_char) -> FcilStatus {
    guard(|| {
        non_null!(config);
        let kv = match read_str(key_value) {
            Ok(t) => t,
            Err(s) => return s,
        };
        let cfg = &mut *config;
        match cfg.inner.with_overrides(&[kv.to_string()]) {
            Ok(next) => {
                cfg.inner = next;
                FcilStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Writes the configuration as TOML into `buf` (see [`fcil_last_error`] for
/// the buffer protocol).
///
/// # Safety
/// `config` must be a live handle; buffer rules as for [`fcil_last_error`].
#[no_mangle]
pub unsafe extern "C" fn fcil_config_to_toml(
    config: *const FcilConfig,
    buf: *mut c_char,
    cap: usize,
    needed: *mut usize,
) -> FcilStatus {
    guard(|| {
        non_null!(config);
        write_text(&(*config).inner.to_toml(), buf, cap, needed)
    })
}

/// # Safety
/// `config` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fcil_config_free(config: *mut FcilConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Runs the full experiment in memory.
///
/// # Safety
/// `config` must be a live handle; `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn fcil_experiment_run(
    config: *const FcilConfig,
    out: *mut *mut FcilExperiment,
) -> FcilStatus {
    guard(|| {
        non_null!(config, out);
        match run_experiment(&(*config).inner) {
            Ok(o) => {
                let json = o.record.to_json();
                *out = Box::into_raw(Box::new(FcilExperiment {
                    record: o.record,
                    json,
                }));
                FcilStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Runs the experiment and writes the standard artifact layout to `dir`.
///
/// # Safety
/// `config` must be a live handle; `dir` a NUL-terminated path.
#[no_mangle]
pub unsafe extern "C" fn fcil_experiment_run_to_dir(config: *const FcilConfig, dir: *const c_char) -> FcilStatus {
    guard(|| {
        non_null!(config);
        let dir = match read_str(dir) {
            Ok(d) => d,
            Err(s) => return s,
        };
        match fcil_core::cli::cmd_run(&(*config).inner, Path::new(dir)) {
            Ok(_) => FcilStatus::Ok,
            Err(e) => match e.downcast::<Error>() {
                Ok(err) => fail(err),
                Err(other) => {
                    set_error(format!("{other:#}"));
                    FcilStatus::Runtime
                }
            },
        }
    })
}

/// Final all-seen accuracy and the mean over stages.
///
/// # Safety
/// `exp` must be a live handle; `a_n` and `avg` writable.
#[no_mangle]
pub unsafe extern "C" fn fcil_experiment_summary(
    exp: *const FcilExperiment,
    a_n: *mut f64,
    avg: *mut f64,
) -> FcilStatus {
    guard(|| {
        non_null!(exp, a_n, avg);
        let r = &(*exp).record;
        *a_n = r.a_n.unwrap_or(f64::NAN);
        *avg = r.avg.unwrap_or(f64::NAN);
        FcilStatus::Ok
    })
}

/// Number of completed stages.
///
/// # Safety
/// `exp` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fcil_experiment_stage_count(exp: *const FcilExperiment, out: *mut usize) -> FcilStatus {
    guard(|| {
        non_null!(exp, out);
        *out = (*exp).record.stages.len();
        FcilStatus::Ok
    })
}

/// Accuracy on task `task` after stage `stage` (both 0-based, `task <= stage`).
///
/// # Safety
/// `exp` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fcil_experiment_accuracy(
    exp: *const FcilExperiment,
    stage: usize,
    task: usize,
    out: *mut f64,
) -> FcilStatus {
    guard(|| {
        non_null!(exp, out);
        match (*exp).record.accuracy_matrix.get(stage, task) {
            Some(v) => {
                *out = v;
                FcilStatus::Ok
            }
            None => {
                set_error(format!("no accuracy entry for stage {stage}, task {task}"));
                FcilStatus::OutOfRange
            }
        }
    })
}

/// Copies the experiment record as JSON.
///
/// # Safety
/// `exp` must be a live handle; buffer rules as for [`fcil_last_error`].
#[no_mangle]
pub unsafe extern "C" fn fcil_experiment_record_json(
    exp: *const FcilExperiment,
    buf: *mut c_char,
    cap: usize,
    needed: *mut usize,
) -> FcilStatus {
    guard(|| {
        non_null!(exp);
        write_text(&(*exp).json, buf, cap, needed)
    })
}

/// # Safety
/// `exp` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fcil_experiment_free(exp: *mut FcilExperiment) {
    if !exp.is_null() {
        drop(Box::from_raw(exp));
    }
}

/// Re-weights `k` client prototypes of one class.
///
/// `prototypes` and `means` are row-major `k × dim` arrays (a zero row in
/// `means` marks a client without samples). Writes `k` weights and the
/// `dim`-long global prototype.
///
/// # Safety
/// Input arrays must hold `k * dim` doubles; `weights_out` must hold `k`,
/// `prototype_out` `dim`.
#[no_mangle]
pub unsafe extern "C" fn fcil_prototype_reweight(
    k: usize,
    dim: usize,
    prototypes: *const f64,
    means: *const f64,
    eta: f64,
    weights_out: *mut f64,
    prototype_out: *mut f64,
) -> FcilStatus {
    guard(|| {
        non_null!(prototypes, means, weights_out, prototype_out);
        if k == 0 || dim == 0 {
            set_error("k and dim must be >= 1");
            return FcilStatus::OutOfRange;
        }
        if !(eta > 0.0 && eta.is_finite()) {
            set_error("eta must be finite and > 0");
            return FcilStatus::Config;
        }
        let protos = std::slice::from_raw_parts(prototypes, k * dim);
        let mus = std::slice::from_raw_parts(means, k * dim);
        let uploads: Vec<ClientUpload> = (0..k)
            .map(|i| ClientUpload {
                client_id: i,
                adapters: Default::default(),
                prototypes: [(0, Vector(protos[i * dim..(i + 1) * dim].to_vec()))].into(),
                class_means: [(0, Vector(mus[i * dim..(i + 1) * dim].to_vec()))].into(),
                sample_count: 1,
                class_counts: Default::default(),
            })
            .collect();
        match prototype_reweight(&uploads, eta) {
            Ok(r) => {
                ptr::copy_nonoverlapping(r.weights[&0].as_ptr(), weights_out, k);
                ptr::copy_nonoverlapping(r.prototypes[&0].as_ptr(), prototype_out, dim);
                FcilStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}
