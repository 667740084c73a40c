//! C ABI over the backstep engine.
//!
//! Every function returns a [`BsStatus`]; on failure the message is
//! available from [`bs_last_error`] on the same thread. Objects are opaque
//! handles created by `*_new`/`*_load` functions and released with the
//! matching `*_free`. Strings and byte buffers handed out by the library
//! must be released with [`bs_string_free`] and [`bs_bytes_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::sync::Arc;

use backstep::config::RunConfig;
use backstep::curriculum::{run_training, Control, TrainingResult};
use backstep::demo::{record, validate_replay, Demonstration};
use backstep::env::{Action, EnvSnapshot, EnvSpec, Environment};
use backstep::Error;

/// Result code of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BsStatus {
    BsOk = 0,
    BsErrNullPointer = 1,
    BsErrInvalidUtf8 = 2,
    BsErrValidation = 3,
    BsErrContractViolation = 4,
    BsErrIncompatible = 5,
    BsErrDecode = 6,
    BsErrConflict = 7,
    BsErrNotFound = 8,
    BsErrIo = 9,
    BsErrPanic = 10,
}

/// An environment instance.
pub struct BsEnv {
    env: Box<dyn Environment>,
}

/// A demonstration.
pub struct BsDemo {
    demo: Arc<Demonstration>,
}

/// Outcome of a training run.
pub struct BsTrainResult {
    result: TrainingResult,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> BsStatus {
    match e {
        Error::Validation(_) => BsStatus::BsErrValidation,
        Error::ContractViolation(_) => BsStatus::BsErrContractViolation,
        Error::Incompatible(_) => BsStatus::BsErrIncompatible,
        Error::Decode(_) | Error::Json(_) => BsStatus::BsErrDecode,
        Error::Conflict(_) => BsStatus::BsErrConflict,
        Error::NotFound(_) => BsStatus::BsErrNotFound,
        Error::Io(_) => BsStatus::BsErrIo,
    }
}

struct Fail(BsStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

type FfiResult = Result<(), Fail>;

fn guard(f: impl FnOnce() -> FfiResult) -> BsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => BsStatus::BsOk,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            BsStatus::BsErrPanic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(BsStatus::BsErrNullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail(BsStatus::BsErrInvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

fn parse_spec(text: &str) -> Result<EnvSpec, Fail> {
    if text.trim_start().starts_with('{') {
        serde_json::from_str(text).map_err(|e| Fail(BsStatus::BsErrDecode, format!("invalid environment JSON: {e}")))
    } else {
        Ok(text.parse()?)
    }
}

fn give_string(s: String, dst: *mut *mut c_char) -> FfiResult {
    let dst = unsafe { out(dst, "output string")? };
    let c = CString::new(s).map_err(|_| Fail(BsStatus::BsErrDecode, "string contains a nul byte".into()))?;
    *dst = c.into_raw();
    Ok(())
}

fn give_bytes(bytes: Vec<u8>, dst: *mut *mut u8, len: *mut usize) -> FfiResult {
    let dst = unsafe { out(dst, "output buffer")? };
    let len = unsafe { out(len, "output length")? };
    let boxed = bytes.into_boxed_slice();
    *len = boxed.len();
    *dst = Box::into_raw(boxed) as *mut u8;
    Ok(())
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn bs_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn bs_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// # Safety
/// `s` must be null or a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn bs_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// # Safety
/// `buf`/`len` must be a buffer returned by this library.
#[no_mangle]
pub unsafe extern "C" fn bs_bytes_free(buf: *mut u8, len: usize) {
    if !buf.is_null() {
        drop(Box::from_raw(ptr::slice_from_raw_parts_mut(buf, len)));
    }
}

/// Create an environment from `cliff:<n>[:<seed>]`, `keydoor`, or a JSON
/// environment spec such as `{"env":"blind_cliff_walk","n_states":6}`.
///
/// # Safety
/// `spec` must be a nul-terminated string; `out_env` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bs_env_new(spec: *const c_char, out_env: *mut *mut BsEnv) -> BsStatus {
    guard(|| {
        let spec = parse_spec(str_arg(spec, "spec")?)?;
        let out_env = out(out_env, "out_env")?;
        let mut env = spec.build()?;
        env.reset();
        *out_env = Box::into_raw(Box::new(BsEnv { env }));
        Ok(())
    })
}

/// # Safety
/// `env` must be null or a handle from [`bs_env_new`].
#[no_mangle]
pub unsafe extern "C" fn bs_env_free(env: *mut BsEnv) {
    if !env.is_null() {
        drop(Box::from_raw(env));
    }
}

/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn bs_env_action_count(env: *const BsEnv, out_count: *mut u32) -> BsStatus {
    guard(|| {
        *out(out_count, "out_count")? = handle(env, "env")?.env.action_count() as u32;
        Ok(())
    })
}

/// # Safety
/// `env` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn bs_env_reset(env: *mut BsEnv) -> BsStatus {
    guard(|| {
        out(env, "env")?.env.reset();
        Ok(())
    })
}

/// Apply one action. `out_reward` and `out_done` may be null.
///
/// # Safety
/// `env` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn bs_env_step(env: *mut BsEnv, action: u32, out_reward: *mut f64, out_done: *mut bool) -> BsStatus {
    guard(|| {
        let r = out(env, "env")?.env.step(Action(action))?;
        if let Some(p) = out_reward.as_mut() {
            *p = r.reward;
        }
        if let Some(p) = out_done.as_mut() {
            *p = r.done;
        }
        Ok(())
    })
}

/// Current observation as JSON. Free with [`bs_string_free`].
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn bs_env_observation_json(env: *const BsEnv, out_json: *mut *mut c_char) -> BsStatus {
    guard(|| {
        let obs = handle(env, "env")?.env.observe();
        give_string(serde_json::to_string(&obs).map_err(Error::from)?, out_json)
    })
}

/// Structured state view as JSON. Free with [`bs_string_free`].
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn bs_env_render_json(env: *const BsEnv, out_json: *mut *mut c_char) -> BsStatus {
    guard(|| give_string(handle(env, "env")?.env.render_view().to_string(), out_json))
}

/// Serialize the full environment state. Free with [`bs_bytes_free`].
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn bs_env_snapshot(env: *const BsEnv, out_buf: *mut *mut u8, out_len: *mut usize) -> BsStatus {
    guard(|| give_bytes(handle(env, "env")?.env.snapshot().to_bytes(), out_buf, out_len))
}

/// Restore state from bytes produced by [`bs_env_snapshot`].
///
/// # Safety
/// `buf` must point to `len` readable bytes.
#[no_mangle]
pub unsafe extern "C" fn bs_env_restore(env: *mut BsEnv, buf: *const u8, len: usize) -> BsStatus {
    guard(|| {
        if buf.is_null() {
            return Err(null("buf"));
        }
        let snap = EnvSnapshot::from_bytes(std::slice::from_raw_parts(buf, len))?;
        out(env, "env")?.env.restore(&snap)?;
        Ok(())
    })
}

/// # Safety
/// `path` must be a nul-terminated string; `out_demo` writable.
#[no_mangle]
pub unsafe extern "C" fn bs_demo_load(path: *const c_char, out_demo: *mut *mut BsDemo) -> BsStatus {
    guard(|| {
        let demo = Demonstration::load(str_arg(path, "path")?)?;
        *out(out_demo, "out_demo")? = Box::into_raw(Box::new(BsDemo { demo: Arc::new(demo) }));
        Ok(())
    })
}

/// Record a demonstration by playing `actions` from a fresh environment.
/// The episode must end on the last action.
///
/// # Safety
/// `actions` must point to `count` values.
#[no_mangle]
pub unsafe extern "C" fn bs_demo_record(
    spec: *const c_char,
    actions: *const u32,
    count: usize,
    out_demo: *mut *mut BsDemo,
) -> BsStatus {
    guard(|| {
        let spec = parse_spec(str_arg(spec, "spec")?)?;
        if actions.is_null() && count > 0 {
            return Err(null("actions"));
        }
        let list: &[u32] = if count == 0 { &[] } else { std::slice::from_raw_parts(actions, count) };
        let demo = record(&spec, list.iter().map(|&a| Action(a)), "")?;
        *out(out_demo, "out_demo")? = Box::into_raw(Box::new(BsDemo { demo: Arc::new(demo) }));
        Ok(())
    })
}

/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn bs_demo_save(demo: *const BsDemo, path: *const c_char) -> BsStatus {
    guard(|| {
        handle(demo, "demo")?.demo.save(str_arg(path, "path")?)?;
        Ok(())
    })
}

/// # Safety
/// `demo` must be null or a demo handle.
#[no_mangle]
pub unsafe extern "C" fn bs_demo_free(demo: *mut BsDemo) {
    if !demo.is_null() {
        drop(Box::from_raw(demo));
    }
}

/// Number of recorded steps and the total return.
///
/// # Safety
/// Pointers must be valid; outputs may be null.
#[no_mangle]
pub unsafe extern "C" fn bs_demo_info(demo: *const BsDemo, out_len: *mut usize, out_return: *mut f64) -> BsStatus {
    guard(|| {
        let d = &handle(demo, "demo")?.demo;
        if let Some(p) = out_len.as_mut() {
            *p = d.len();
        }
        if let Some(p) = out_return.as_mut() {
            *p = d.total_return();
        }
        Ok(())
    })
}

/// Replay the demonstration. `out_exact` is set to whether it replays
/// exactly; on divergence `out_step` receives the first diverging step.
///
/// # Safety
/// Pointers must be valid; `out_step` may be null.
#[no_mangle]
pub unsafe extern "C" fn bs_demo_validate(demo: *const BsDemo, out_exact: *mut bool, out_step: *mut usize) -> BsStatus {
    guard(|| {
        let d = &handle(demo, "demo")?.demo;
        let report = validate_replay(d, &d.env_spec()?)?;
        *out(out_exact, "out_exact")? = report.is_exact();
        if let (Some(p), Some(div)) = (out_step.as_mut(), report.divergence) {
            *p = div.step;
        }
        Ok(())
    })
}

/// Train with a TOML run configuration. `demo` may be null for the
/// from-start condition. Blocks until the run ends.
///
/// # Safety
/// Pointers must be valid; `demo` may be null.
#[no_mangle]
pub unsafe extern "C" fn bs_train(config_toml: *const c_char, demo: *const BsDemo, out_result: *mut *mut BsTrainResult) -> BsStatus {
    guard(|| {
        let config = RunConfig::from_toml(str_arg(config_toml, "config_toml")?)?;
        let demo = demo.as_ref().map(|d| d.demo.clone());
        let result = run_training(&config, demo, None, &mut |_, _| Control::Continue)?;
        *out(out_result, "out_result")? = Box::into_raw(Box::new(BsTrainResult { result }));
        Ok(())
    })
}

/// Summary of a finished run. Any output pointer may be null.
///
/// # Safety
/// `result` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn bs_train_result_info(
    result: *const BsTrainResult,
    out_converged: *mut bool,
    out_tau: *mut usize,
    out_live_steps: *mut u64,
    out_greedy_return: *mut f64,
) -> BsStatus {
    guard(|| {
        let r = &handle(result, "result")?.result;
        if let Some(p) = out_converged.as_mut() {
            *p = r.converged;
        }
        if let Some(p) = out_tau.as_mut() {
            *p = r.tau;
        }
        if let Some(p) = out_live_steps.as_mut() {
            *p = r.live_steps;
        }
        if let Some(p) = out_greedy_return.as_mut() {
            *p = r.final_greedy_return.unwrap_or(f64::NAN);
        }
        Ok(())
    })
}

/// Write the run's checkpoint to `path`.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn bs_train_result_save_checkpoint(result: *const BsTrainResult, path: *const c_char) -> BsStatus {
    guard(|| {
        handle(result, "result")?.result.checkpoint.save(str_arg(path, "path")?)?;
        Ok(())
    })
}

/// # Safety
/// `result` must be null or a handle from [`bs_train`].
#[no_mangle]
pub unsafe extern "C" fn bs_train_result_free(result: *mut BsTrainResult) {
    if !result.is_null() {
        drop(Box::from_raw(result));
    }
}
