//! C ABI over the simulator and the morphology tree.
//!
//! Handles are opaque and owned by the caller, who releases them with the
//! matching `_free` function. Every fallible call returns a [`CoevoStatus`];
//! the message of the last failure on the calling thread is available from
//! [`coevo_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;

use coevo_core::morphology::{MorphError, Morphology};
use coevo_core::sim2d::{generate_terrain, roughness, EnvParams, SimConfig, SimError, World, OBS_DIM};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoevoStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidJson = 3,
    InvalidMorphology = 4,
    InvalidParams = 5,
    Simulation = 6,
    Terminated = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoevoEnvKind {
    RoughTerrain = 0,
    GapCrosser = 1,
}

/// Environment parameters; fields unused by `kind` are ignored.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct CoevoEnvParams {
    pub kind: CoevoEnvKind,
    pub max_height: f64,
    pub height_variance: f64,
    pub gap_width: f64,
}

/// Result of one control step.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct CoevoStep {
    pub reward: f64,
    pub speed: f64,
    pub done: bool,
}

pub struct CoevoMorphology {
    inner: Morphology,
}

pub struct CoevoWorld {
    inner: World,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn fail(status: CoevoStatus, msg: impl Into<String>) -> CoevoStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
    status
}

fn guard(f: impl FnOnce() -> CoevoStatus) -> CoevoStatus {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| fail(CoevoStatus::Panic, "panic in library call"))
}

fn sim_status(e: SimError) -> CoevoStatus {
    let s = match e {
        SimError::InvalidParams(_) => CoevoStatus::InvalidParams,
        SimError::InvalidMorphology(_) => CoevoStatus::InvalidMorphology,
        SimError::Terminated => CoevoStatus::Terminated,
        SimError::ActionShape { .. } | SimError::NonFiniteAction => CoevoStatus::InvalidArgument,
        _ => CoevoStatus::Simulation,
    };
    fail(s, e.to_string())
}

fn morph_status(e: MorphError) -> CoevoStatus {
    let s = match e {
        MorphError::Schema { .. } => CoevoStatus::InvalidJson,
        MorphError::ChildLimit(_) => CoevoStatus::InvalidArgument,
        _ => CoevoStatus::InvalidMorphology,
    };
    fail(s, e.to_string())
}

fn to_params(p: &CoevoEnvParams) -> EnvParams {
    match p.kind {
        CoevoEnvKind::RoughTerrain => EnvParams::rough(p.max_height, p.height_variance),
        CoevoEnvKind::GapCrosser => EnvParams::gap(p.gap_width),
    }
}

/// Copies `bytes` plus a terminating NUL into `buf` when it fits; `len`
/// always receives the required size including the NUL.
unsafe fn copy_out(bytes: &[u8], buf: *mut c_char, cap: usize, len: *mut usize) -> CoevoStatus {
    if !len.is_null() {
        *len = bytes.len() + 1;
    }
    if buf.is_null() || cap < bytes.len() + 1 {
        return fail(CoevoStatus::BufferTooSmall, format!("need {} bytes", bytes.len() + 1));
    }
    std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, bytes.len());
    *buf.add(bytes.len()) = 0;
    CoevoStatus::Ok
}

/// Copies the last error message of this thread into `buf`; see
/// `coevo_morphology_to_json` for the buffer protocol.
///
/// # Safety
/// `buf` must be valid for `cap` bytes or null; `len` must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn coevo_last_error(buf: *mut c_char, cap: usize, len: *mut usize) -> CoevoStatus {
    let msg = LAST_ERROR.with(|e| e.borrow().clone());
    copy_out(msg.as_bytes(), buf, cap, len)
}

/// Default starting design: a head with `num_lv1` single-bone limbs.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn coevo_morphology_initial(num_lv1: usize, out: *mut *mut CoevoMorphology) -> CoevoStatus {
    guard(|| {
        if out.is_null() {
            return fail(CoevoStatus::NullPointer, "out is null");
        }
        match Morphology::initial(num_lv1) {
            Ok(m) => {
                *out = Box::into_raw(Box::new(CoevoMorphology { inner: m }));
                CoevoStatus::Ok
            }
            Err(e) => morph_status(e),
        }
    })
}

/// Parses a morphology document.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn coevo_morphology_from_json(json: *const c_char, out: *mut *mut CoevoMorphology) -> CoevoStatus {
    guard(|| {
        if json.is_null() || out.is_null() {
            return fail(CoevoStatus::NullPointer, "null argument");
        }
        let Ok(text) = CStr::from_ptr(json).to_str() else {
            return fail(CoevoStatus::InvalidJson, "document is not UTF-8");
        };
        match Morphology::from_json(text) {
            Ok(m) => {
                *out = Box::into_raw(Box::new(CoevoMorphology { inner: m }));
                CoevoStatus::Ok
            }
            Err(e) => morph_status(e),
        }
    })
}

/// Serializes a morphology. Call with a null `buf` to learn the size.
///
/// # Safety
/// `m` must come from this library; `buf` valid for `cap` bytes or null.
#[no_mangle]
pub unsafe extern "C" fn coevo_morphology_to_json(
    m: *const CoevoMorphology,
    buf: *mut c_char,
    cap: usize,
    len: *mut usize,
) -> CoevoStatus {
    guard(|| match m.as_ref() {
        None => fail(CoevoStatus::NullPointer, "morphology is null"),
        Some(m) => copy_out(m.inner.to_json().as_bytes(), buf, cap, len),
    })
}

/// Number of nodes, or 0 for a null handle.
///
/// # Safety
/// `m` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn coevo_morphology_node_count(m: *const CoevoMorphology) -> usize {
    m.as_ref().map_or(0, |m| m.inner.len())
}

/// # Safety
/// `m` must come from this library or be null, and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn coevo_morphology_free(m: *mut CoevoMorphology) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Builds a world for `m` on terrain generated from `params` and `seed`,
/// using the default simulator settings.
///
/// # Safety
/// `m` and `params` must be valid; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn coevo_world_new(
    m: *const CoevoMorphology,
    params: *const CoevoEnvParams,
    seed: u64,
    out: *mut *mut CoevoWorld,
) -> CoevoStatus {
    guard(|| {
        let (Some(m), Some(p)) = (m.as_ref(), params.as_ref()) else {
            return fail(CoevoStatus::NullPointer, "null argument");
        };
        if out.is_null() {
            return fail(CoevoStatus::NullPointer, "out is null");
        }
        let cfg = SimConfig::default();
        let params = to_params(p);
        let hf = match generate_terrain(&params, seed, &cfg.terrain, &cfg.bounds) {
            Ok(h) => h,
            Err(e) => return sim_status(e),
        };
        match World::reset(&m.inner, Arc::new(hf), params.env_kind, &cfg) {
            Ok(w) => {
                *out = Box::into_raw(Box::new(CoevoWorld { inner: w }));
                CoevoStatus::Ok
            }
            Err(e) => sim_status(e),
        }
    })
}

/// Entries expected by `coevo_world_step`: one per morphology node.
///
/// # Safety
/// `w` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn coevo_world_joint_count(w: *const CoevoWorld) -> usize {
    w.as_ref().map_or(0, |w| w.inner.joint_count())
}

/// Advances one control step with `n` normalized torques.
///
/// # Safety
/// `w` must be valid; `torques` valid for `n` reads; `out` valid or null.
#[no_mangle]
pub unsafe extern "C" fn coevo_world_step(
    w: *mut CoevoWorld,
    torques: *const f64,
    n: usize,
    out: *mut CoevoStep,
) -> CoevoStatus {
    guard(|| {
        let Some(w) = w.as_mut() else {
            return fail(CoevoStatus::NullPointer, "world is null");
        };
        if torques.is_null() && n > 0 {
            return fail(CoevoStatus::NullPointer, "torques is null");
        }
        let t = if n == 0 { &[][..] } else { std::slice::from_raw_parts(torques, n) };
        match w.inner.step(t) {
            Ok(r) => {
                if let Some(o) = out.as_mut() {
                    *o = CoevoStep { reward: r.reward, speed: r.info.speed, done: r.done };
                }
                CoevoStatus::Ok
            }
            Err(e) => sim_status(e),
        }
    })
}

/// Writes the observation, six values per node, into `buf`; `len` receives
/// the number of values.
///
/// # Safety
/// `w` must be valid; `buf` valid for `cap` writes or null; `len` valid or null.
#[no_mangle]
pub unsafe extern "C" fn coevo_world_observe(
    w: *const CoevoWorld,
    buf: *mut f64,
    cap: usize,
    len: *mut usize,
) -> CoevoStatus {
    guard(|| {
        let Some(w) = w.as_ref() else {
            return fail(CoevoStatus::NullPointer, "world is null");
        };
        let flat: Vec<f64> = w.inner.observe().into_iter().flatten().collect();
        debug_assert_eq!(flat.len() % OBS_DIM, 0);
        if !len.is_null() {
            *len = flat.len();
        }
        if buf.is_null() || cap < flat.len() {
            return fail(CoevoStatus::BufferTooSmall, format!("need {} values", flat.len()));
        }
        std::ptr::copy_nonoverlapping(flat.as_ptr(), buf, flat.len());
        CoevoStatus::Ok
    })
}

/// Root (head) position.
///
/// # Safety
/// `w` must be valid; `x` and `z` valid or null.
#[no_mangle]
pub unsafe extern "C" fn coevo_world_root(w: *const CoevoWorld, x: *mut f64, z: *mut f64) -> CoevoStatus {
    guard(|| {
        let Some(w) = w.as_ref() else {
            return fail(CoevoStatus::NullPointer, "world is null");
        };
        if let Some(x) = x.as_mut() {
            *x = w.inner.state().root_x();
        }
        if let Some(z) = z.as_mut() {
            *z = w.inner.state().root_z();
        }
        CoevoStatus::Ok
    })
}

/// # Safety
/// `w` must come from this library or be null, and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn coevo_world_free(w: *mut CoevoWorld) {
    if !w.is_null() {
        drop(Box::from_raw(w));
    }
}

/// Roughness of the terrain generated from `params` and `seed`.
///
/// # Safety
/// `params` and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn coevo_terrain_roughness(params: *const CoevoEnvParams, seed: u64, out: *mut f64) -> CoevoStatus {
    guard(|| {
        let (Some(p), Some(out)) = (params.as_ref(), out.as_mut()) else {
            return fail(CoevoStatus::NullPointer, "null argument");
        };
        let cfg = SimConfig::default();
        let params = to_params(p);
        if let Err(e) = params.validate(&cfg.bounds) {
            return sim_status(e);
        }
        *out = roughness(&params, seed, &cfg.terrain, &cfg.bounds);
        CoevoStatus::Ok
    })
}

