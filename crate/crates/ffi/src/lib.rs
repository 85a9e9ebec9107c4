//! C interface to the racing library.
//!
//! Worlds and models are opaque handles created by `pr_*_new`/`pr_*_load`
//! and released with the matching `pr_*_free`. Every fallible call returns a
//! [`PrStatus`]; on failure a message for the calling thread is available
//! from [`pr_last_error_message`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use potential_racing::dynamics::{step, CarState, ControlInput, VehicleParams};
use potential_racing::equilibrium::{maximize_potential, ArgmaxConfig, PotentialObjective};
use potential_racing::game::World;
use potential_racing::learning::{Featurizer, Mlp};
use potential_racing::policy::{Controller, MpcConfig, PolicyParams, THETA_DIM};
use potential_racing::track::{Track, VelocityProfileConfig};
use potential_racing::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// Rejected input: bad configuration, data or dimensions.
    InvalidInput = 3,
    /// The computation failed (I/O, numerical breakdown).
    Runtime = 4,
    /// An internal panic was caught at the boundary.
    Panic = 5,
}

/// One car's state: Frenet position, heading error, body-frame velocities
/// and yaw rate.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PrCarState {
    pub p_x: f64,
    pub p_y: f64,
    pub phi: f64,
    pub v_x: f64,
    pub v_y: f64,
    pub omega: f64,
}

/// Throttle and steering angle.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PrControl {
    pub d: f64,
    pub delta: f64,
}

/// Track, raceline, vehicle and MPC settings.
pub struct PrWorld(World);

/// A trained network.
pub struct PrModel(Mlp);

impl From<PrCarState> for CarState {
    fn from(s: PrCarState) -> Self {
        CarState {
            p_x: s.p_x,
            p_y: s.p_y,
            phi: s.phi,
            v_x: s.v_x,
            v_y: s.v_y,
            omega: s.omega,
        }
    }
}

impl From<CarState> for PrCarState {
    fn from(s: CarState) -> Self {
        PrCarState {
            p_x: s.p_x,
            p_y: s.p_y,
            phi: s.phi,
            v_x: s.v_x,
            v_y: s.v_y,
            omega: s.omega,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Fail(PrStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let code = if e.is_validation() {
            PrStatus::InvalidInput
        } else {
            PrStatus::Runtime
        };
        Fail(code, e.to_string())
    }
}

/// Runs `f`, recording any failure or panic as the thread's last error.
fn guard<F: FnOnce() -> Result<(), Fail>>(f: F) -> PrStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PrStatus::Ok,
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            PrStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), Fail> {
    if p.is_null() {
        return Err(Fail(PrStatus::NullPointer, format!("{name} is null")));
    }
    Ok(())
}

/// # Safety
/// `p` must be null or point to a NUL-terminated string.
unsafe fn path<'a>(p: *const c_char, name: &str) -> Result<&'a Path, Fail> {
    non_null(p, name)?;
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(PrStatus::InvalidUtf8, format!("{name} is not valid UTF-8")))?;
    Ok(Path::new(s))
}

/// # Safety
/// `p` must be null or valid for reading `n` values.
unsafe fn slice<'a, T>(p: *const T, n: usize, name: &str) -> Result<&'a [T], Fail> {
    non_null(p, name)?;
    Ok(std::slice::from_raw_parts(p, n))
}

/// # Safety
/// `p` must be null or valid for writing `n` values.
unsafe fn slice_mut<'a, T>(p: *mut T, n: usize, name: &str) -> Result<&'a mut [T], Fail> {
    non_null(p, name)?;
    Ok(std::slice::from_raw_parts_mut(p, n))
}

/// Message of the last failed call on this thread, or null after a
/// successful call. Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn pr_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Number of policy parameters per car: q, zeta, s1, s2, s3.
#[no_mangle]
pub extern "C" fn pr_theta_dim() -> usize {
    THETA_DIM
}

/// The bundled circuit with the default car.
///
/// # Safety
/// `out` must be valid for writing one pointer.
#[no_mangle]
pub unsafe extern "C" fn pr_world_new_bundled(out: *mut *mut PrWorld) -> PrStatus {
    guard(|| {
        non_null(out, "out")?;
        let w = World::bundled()?;
        *out = Box::into_raw(Box::new(PrWorld(w)));
        Ok(())
    })
}

/// A world from an `x,y,w` track CSV and a vehicle parameter JSON, with
/// default MPC and profile settings at friction `mu`.
///
/// # Safety
/// The paths must be NUL-terminated strings and `out` valid for writing
/// one pointer.
#[no_mangle]
pub unsafe extern "C" fn pr_world_load(
    track_csv: *const c_char,
    closed: bool,
    vehicle_json: *const c_char,
    mu: f64,
    out: *mut *mut PrWorld,
) -> PrStatus {
    guard(|| {
        non_null(out, "out")?;
        let track = Track::load_csv(path(track_csv, "track_csv")?, closed)?;
        let vp = VehicleParams::load(path(vehicle_json, "vehicle_json")?)?;
        let w = World::new(
            track,
            vp,
            MpcConfig::default(),
            VelocityProfileConfig::default(),
            mu,
        )?;
        *out = Box::into_raw(Box::new(PrWorld(w)));
        Ok(())
    })
}

/// Releases a world; null is ignored.
///
/// # Safety
/// `world` must be null or a pointer returned by this library that has not
/// been freed.
#[no_mangle]
pub unsafe extern "C" fn pr_world_free(world: *mut PrWorld) {
    if !world.is_null() {
        drop(Box::from_raw(world));
    }
}

/// Centerline length in metres (0 for a null world).
///
/// # Safety
/// `world` must be null or a live world handle.
#[no_mangle]
pub unsafe extern "C" fn pr_world_track_length(world: *const PrWorld) -> f64 {
    world.as_ref().map_or(0.0, |w| w.0.track.length())
}

/// One simulation step of a single car at the world's time step.
///
/// # Safety
/// All pointers must be valid; `world` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn pr_world_step(
    world: *const PrWorld,
    state: *const PrCarState,
    control: *const PrControl,
    out: *mut PrCarState,
) -> PrStatus {
    guard(|| {
        non_null(world, "world")?;
        non_null(state, "state")?;
        non_null(control, "control")?;
        non_null(out, "out")?;
        let w = &(*world).0;
        let s: CarState = (*state).into();
        let u = w.vp.clamp_control(ControlInput {
            d: (*control).d,
            delta: (*control).delta,
        });
        let next = step(&s, &u, &w.vp, w.track.kappa_at(s.p_x), w.mpc.dt)?;
        *out = next.into();
        Ok(())
    })
}

/// Control chosen by the racing policy with parameters `theta`
/// (`pr_theta_dim()` values) for car `ego` of the joint state `states`.
///
/// # Safety
/// `states` must hold `n_cars` states, `theta` `pr_theta_dim()` values and
/// `out` must be writable; `world` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn pr_policy_act(
    world: *const PrWorld,
    states: *const PrCarState,
    n_cars: usize,
    ego: usize,
    theta: *const f64,
    out: *mut PrControl,
) -> PrStatus {
    guard(|| {
        non_null(world, "world")?;
        non_null(out, "out")?;
        let w = &(*world).0;
        let states: Vec<CarState> = slice(states, n_cars, "states")?
            .iter()
            .map(|&s| s.into())
            .collect();
        if ego >= n_cars {
            return Err(Fail(
                PrStatus::InvalidInput,
                format!("ego {ego} out of range for {n_cars} cars"),
            ));
        }
        let theta = PolicyParams::from_slice(slice(theta, THETA_DIM, "theta")?)?;
        theta.validate()?;
        let u = Controller::new(theta).act(&w.context(), &states, ego);
        *out = PrControl {
            d: u.d,
            delta: u.delta,
        };
        Ok(())
    })
}

/// Loads a model file written by the racing tool.
///
/// # Safety
/// `path_json` must be a NUL-terminated string and `out` valid for writing
/// one pointer.
#[no_mangle]
pub unsafe extern "C" fn pr_model_load(
    path_json: *const c_char,
    out: *mut *mut PrModel,
) -> PrStatus {
    guard(|| {
        non_null(out, "out")?;
        let m = Mlp::load(path(path_json, "path")?)?;
        *out = Box::into_raw(Box::new(PrModel(m)));
        Ok(())
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must be null or a pointer returned by this library that has not
/// been freed.
#[no_mangle]
pub unsafe extern "C" fn pr_model_free(model: *mut PrModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input width of a model (0 for a null model).
///
/// # Safety
/// `model` must be null or a live model handle.
#[no_mangle]
pub unsafe extern "C" fn pr_model_input_dim(model: *const PrModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.input_dim())
}

/// Output width of a model (0 for a null model).
///
/// # Safety
/// `model` must be null or a live model handle.
#[no_mangle]
pub unsafe extern "C" fn pr_model_output_dim(model: *const PrModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.output_dim())
}

/// Evaluates a model on one input row.
///
/// # Safety
/// `input` must hold `n_in` values and `output` have room for `n_out`;
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn pr_model_forward(
    model: *const PrModel,
    input: *const f64,
    n_in: usize,
    output: *mut f64,
    n_out: usize,
) -> PrStatus {
    guard(|| {
        non_null(model, "model")?;
        let m = &(*model).0;
        if n_out != m.output_dim() {
            return Err(Error::DimensionMismatch {
                expected: m.output_dim(),
                got: n_out,
            }
            .into());
        }
        let y = m.forward(slice(input, n_in, "input")?)?;
        slice_mut(output, n_out, "output")?.copy_from_slice(&y);
        Ok(())
    })
}

/// Joint policy parameters maximizing a trained potential at `states`,
/// written car by car into `theta_out` (`n_cars * pr_theta_dim()` values).
/// `restarts` extra random starts are drawn from `seed`.
///
/// # Safety
/// `states` must hold `n_cars` states and `theta_out` have room for
/// `n_cars * pr_theta_dim()` values; handles must be live.
#[no_mangle]
pub unsafe extern "C" fn pr_potential_argmax(
    world: *const PrWorld,
    potential: *const PrModel,
    states: *const PrCarState,
    n_cars: usize,
    restarts: usize,
    seed: u64,
    theta_out: *mut f64,
) -> PrStatus {
    guard(|| {
        non_null(world, "world")?;
        non_null(potential, "potential")?;
        let (w, net) = (&(*world).0, &(*potential).0);
        let states: Vec<CarState> = slice(states, n_cars, "states")?
            .iter()
            .map(|&s| s.into())
            .collect();
        let f = Featurizer::new(n_cars, w.track.length())?;
        let obj = PotentialObjective::new(net, &f, &states)?;
        let cfg = ArgmaxConfig {
            restarts,
            seed,
            ..Default::default()
        };
        let r = maximize_potential(&obj, n_cars, &Default::default(), &cfg)?;
        let out = slice_mut(theta_out, n_cars * THETA_DIM, "theta_out")?;
        for (chunk, t) in out.chunks_mut(THETA_DIM).zip(&r.theta) {
            chunk.copy_from_slice(&t.to_array());
        }
        Ok(())
    })
}
