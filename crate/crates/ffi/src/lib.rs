//! C ABI over guidance-lab: score backends behind an opaque handle, guided
//! generation, and the score-combination primitives.
//!
//! Functions returning `GlStatus` use 0 for success and a negative code on
//! failure; constructors return NULL on failure. In both cases
//! `gl_last_error_message` describes the most recent failure on the calling
//! thread. Handles may be shared across threads for reading.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use guidance_lab::diffusion::{generate, NoiseSchedule, ScheduleKind, SolverKind};
use guidance_lab::guidance::{cfg_score, cosine_gamma, AgConfig, AgController, Controller, Policy, PolicyController};
use guidance_lab::score::{AnalyticGmm, Condition, GmmSpec, MlpScoreNet, NfeCounter, ScoreBackend, ScoreModel};
use guidance_lab::{Error, Tensor};

#[repr(i32)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GlStatus {
    Ok = 0,
    NullPointer = -1,
    InvalidArgument = -2,
    MissingArtifact = -3,
    Numerical = -4,
    InvalidUtf8 = -5,
    BufferTooSmall = -6,
    Panic = -7,
    Internal = -8,
}

impl From<&Error> for GlStatus {
    fn from(e: &Error) -> Self {
        match e.exit_code() {
            2 => GlStatus::InvalidArgument,
            3 => GlStatus::MissingArtifact,
            4 => GlStatus::Numerical,
            _ => GlStatus::Internal,
        }
    }
}

/// Score backend plus its sampling schedule.
pub struct GlModel {
    backend: Box<dyn ScoreBackend>,
    schedule: NoiseSchedule,
    solver: SolverKind,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

struct Fail(GlStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail((&e).into(), e.to_string())
    }
}

type FfiResult<T> = std::result::Result<T, Fail>;

fn fail<T>(status: GlStatus, msg: &str) -> FfiResult<T> {
    Err(Fail(status, msg.into()))
}

fn guard(f: impl FnOnce() -> FfiResult<()>) -> GlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GlStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            GlStatus::Panic
        }
    }
}

fn guard_ptr<T>(f: impl FnOnce() -> FfiResult<Box<T>>) -> *mut T {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(b)) => Box::into_raw(b),
        Ok(Err(Fail(_, msg))) => {
            set_error(msg);
            ptr::null_mut()
        }
        Err(_) => {
            set_error("internal panic");
            ptr::null_mut()
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return fail(GlStatus::NullPointer, &format!("`{name}` is NULL"));
    }
    CStr::from_ptr(p)
        .to_str()
        .or_else(|_| fail(GlStatus::InvalidUtf8, &format!("`{name}` is not valid UTF-8")))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, name: &str) -> FfiResult<&'a [f64]> {
    if p.is_null() {
        return fail(GlStatus::NullPointer, &format!("`{name}` is NULL"));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn slice_out<'a>(p: *mut f64, len: usize, name: &str) -> FfiResult<&'a mut [f64]> {
    if p.is_null() {
        return fail(GlStatus::NullPointer, &format!("`{name}` is NULL"));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

unsafe fn model_ref<'a>(m: *const GlModel) -> FfiResult<&'a GlModel> {
    m.as_ref().map_or_else(|| fail(GlStatus::NullPointer, "`model` is NULL"), Ok)
}

unsafe fn schedule_arg(schedule: *const c_char, steps: usize) -> FfiResult<NoiseSchedule> {
    let kind: ScheduleKind = if schedule.is_null() { ScheduleKind::Cosine } else { str_arg(schedule, "schedule")?.parse()? };
    Ok(NoiseSchedule::new(kind, steps)?)
}

fn model(backend: Box<dyn ScoreBackend>, schedule: NoiseSchedule) -> Box<GlModel> {
    Box::new(GlModel {
        backend,
        schedule,
        solver: SolverKind::Ddim,
    })
}

/// Analytic mixture backend from a preset name (`ring`, `two-blobs`,
/// `gaussian`). `schedule` may be NULL for the cosine schedule.
///
/// # Safety
/// String arguments must be NUL-terminated or NULL.
#[no_mangle]
pub unsafe extern "C" fn gl_model_new_preset(preset: *const c_char, schedule: *const c_char, steps: usize) -> *mut GlModel {
    guard_ptr(|| {
        let spec = GmmSpec::preset(str_arg(preset, "preset")?)?;
        Ok(model(Box::new(AnalyticGmm::new(spec)?), schedule_arg(schedule, steps)?))
    })
}

/// Analytic mixture backend from a JSON mixture spec.
///
/// # Safety
/// String arguments must be NUL-terminated or NULL.
#[no_mangle]
pub unsafe extern "C" fn gl_model_new_analytic(spec_json: *const c_char, schedule: *const c_char, steps: usize) -> *mut GlModel {
    guard_ptr(|| {
        let spec: GmmSpec = serde_json::from_str(str_arg(spec_json, "spec_json")?).map_err(Error::from)?;
        spec.validate()?;
        Ok(model(Box::new(AnalyticGmm::new(spec)?), schedule_arg(schedule, steps)?))
    })
}

/// MLP backend from a checkpoint file written by `guidance-lab train`.
///
/// # Safety
/// String arguments must be NUL-terminated or NULL.
#[no_mangle]
pub unsafe extern "C" fn gl_model_load_mlp(path: *const c_char, schedule: *const c_char, steps: usize) -> *mut GlModel {
    guard_ptr(|| {
        let net = MlpScoreNet::load(Path::new(str_arg(path, "path")?))?;
        Ok(model(Box::new(net), schedule_arg(schedule, steps)?))
    })
}

/// # Safety
/// `model` must come from a constructor above and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn gl_model_free(model: *mut GlModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Latent dimension, or 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gl_model_dim(model: *const GlModel) -> usize {
    model.as_ref().map_or(0, |m| m.backend.dim())
}

/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gl_model_num_classes(model: *const GlModel) -> usize {
    model.as_ref().map_or(0, |m| m.backend.num_classes())
}

/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gl_model_steps(model: *const GlModel) -> usize {
    model.as_ref().map_or(0, |m| m.schedule.steps())
}

/// Negative classes select the unconditional (null) condition.
fn condition(class: i64) -> Condition {
    usize::try_from(class).map_or(Condition::NULL, Condition::class)
}

unsafe fn run(
    m: *const GlModel,
    mut ctrl: Box<dyn Controller>,
    seed: u64,
    class: i64,
    out_x0: *mut f64,
    out_len: usize,
    out_nfe: *mut u64,
) -> FfiResult<()> {
    let m = model_ref(m)?;
    if out_len < m.backend.dim() {
        return fail(GlStatus::BufferTooSmall, &format!("`out_x0` needs {} entries, got {out_len}", m.backend.dim()));
    }
    let out = slice_out(out_x0, m.backend.dim(), "out_x0")?;
    let nfe = NfeCounter::new();
    let sm = ScoreModel::new(m.backend.as_ref(), &m.schedule, &nfe);
    let (x0, _) = generate(&sm, m.solver, ctrl.as_mut(), condition(class), seed)?;
    out.copy_from_slice(x0.data());
    if let Some(n) = out_nfe.as_mut() {
        *n = nfe.get();
    }
    Ok(())
}

/// Full-CFG generation: writes x₀ (dim entries) and the NFE spent.
///
/// # Safety
/// `out_x0` must hold `out_len` doubles; `out_nfe` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn gl_generate_cfg(
    model: *const GlModel,
    seed: u64,
    class: i64,
    s: f64,
    out_x0: *mut f64,
    out_len: usize,
    out_nfe: *mut u64,
) -> GlStatus {
    guard(|| {
        let steps = model_ref(model)?.schedule.steps();
        run(model, Box::new(PolicyController::new(Policy::full_cfg(steps, s))), seed, class, out_x0, out_len, out_nfe)
    })
}

/// Adaptive Guidance: CFG until the branch cosine exceeds `gamma_bar`, then
/// conditional steps only. `gamma_bar` > 1 reproduces full CFG exactly.
///
/// # Safety
/// As for `gl_generate_cfg`.
#[no_mangle]
pub unsafe extern "C" fn gl_generate_ag(
    model: *const GlModel,
    seed: u64,
    class: i64,
    s: f64,
    gamma_bar: f64,
    out_x0: *mut f64,
    out_len: usize,
    out_nfe: *mut u64,
) -> GlStatus {
    guard(|| {
        run(model, Box::new(AgController::new(AgConfig::new(gamma_bar), s)), seed, class, out_x0, out_len, out_nfe)
    })
}

/// Replay a policy given as JSON, e.g. `["cfg:7.5","cond","cond"]` (T + 1 entries).
///
/// # Safety
/// As for `gl_generate_cfg`; `policy_json` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn gl_generate_policy(
    model: *const GlModel,
    policy_json: *const c_char,
    seed: u64,
    class: i64,
    out_x0: *mut f64,
    out_len: usize,
    out_nfe: *mut u64,
) -> GlStatus {
    guard(|| {
        let policy = Policy::from_json(str_arg(policy_json, "policy_json")?)?;
        run(model, Box::new(PolicyController::new(policy)), seed, class, out_x0, out_len, out_nfe)
    })
}

/// Single-latent ε prediction at grid step t.
///
/// # Safety
/// `x` and `out` must hold `len` doubles, `len` equal to the model dimension.
#[no_mangle]
pub unsafe extern "C" fn gl_eval_score(model: *const GlModel, x: *const f64, len: usize, t: usize, class: i64, out: *mut f64) -> GlStatus {
    guard(|| {
        let m = model_ref(model)?;
        let x = Tensor::from_vec(slice_arg(x, len, "x")?.to_vec());
        let out = slice_out(out, len, "out")?;
        let nfe = NfeCounter::new();
        let e = ScoreModel::new(m.backend.as_ref(), &m.schedule, &nfe).eval_score(&x, t, condition(class))?;
        out.copy_from_slice(e.data());
        Ok(())
    })
}

/// out = ε_u + s (ε_c − ε_u).
///
/// # Safety
/// All three buffers must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn gl_cfg_score(eps_uncond: *const f64, eps_cond: *const f64, len: usize, s: f64, out: *mut f64) -> GlStatus {
    guard(|| {
        let u = Tensor::from_vec(slice_arg(eps_uncond, len, "eps_uncond")?.to_vec());
        let c = Tensor::from_vec(slice_arg(eps_cond, len, "eps_cond")?.to_vec());
        slice_out(out, len, "out")?.copy_from_slice(cfg_score(&u, &c, s)?.data());
        Ok(())
    })
}

/// Cosine similarity of two vectors; zero-norm input is an error.
///
/// # Safety
/// `a` and `b` must hold `len` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gl_cosine_gamma(a: *const f64, b: *const f64, len: usize, out: *mut f64) -> GlStatus {
    guard(|| {
        let a = Tensor::from_vec(slice_arg(a, len, "a")?.to_vec());
        let b = Tensor::from_vec(slice_arg(b, len, "b")?.to_vec());
        let Some(out) = out.as_mut() else {
            return fail(GlStatus::NullPointer, "`out` is NULL");
        };
        *out = cosine_gamma(&a, &b)?;
        Ok(())
    })
}

/// NFE a policy spends on its T sampling steps, or a negative status.
///
/// # Safety
/// `policy_json` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn gl_policy_nfe(policy_json: *const c_char) -> i64 {
    let mut nfe = 0i64;
    let status = guard(|| {
        nfe = Policy::from_json(str_arg(policy_json, "policy_json")?)?.nfe() as i64;
        Ok(())
    });
    if status == GlStatus::Ok {
        nfe
    } else {
        status as i64
    }
}

/// Copy the last error message on this thread into `buf` (NUL-terminated,
/// truncated to fit). Returns the full message length excluding the NUL, so
/// a call with `buf_len` 0 sizes the buffer.
///
/// # Safety
/// `buf` must hold `buf_len` bytes, or be NULL with `buf_len` 0.
#[no_mangle]
pub unsafe extern "C" fn gl_last_error_message(buf: *mut c_char, buf_len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && buf_len > 0 {
            let n = msg.len().min(buf_len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}
