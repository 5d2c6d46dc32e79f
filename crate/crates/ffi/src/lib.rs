//! C ABI over the core pipeline.
//!
//! Objects cross the boundary as opaque handles created by `lfhcp_*_new` or
//! producer calls and released by the matching `lfhcp_*_free`. Every fallible
//! call returns an [`LfhcpStatus`]; on failure [`lfhcp_last_error`] describes
//! the cause for the calling thread. Panics never unwind into C.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use lfhcp::coverage::{dcs, CoverageConfig, FeatureSample, Subset};
use lfhcp::filter::{filter_critical_points, FilterReport};
use lfhcp::generator::{generate_scenarios, GeneratorConfig, Scenario};
use lfhcp::geometry::{raycast, LidarConfig};
use lfhcp::hallucinator::{extract_critical_points, fit_phase1, fit_phase2, HallucinationConfig};
use lfhcp::seed::rng_from_seed;
use lfhcp::sim::Rate;
use lfhcp::{Error, Obstacle, Plan, Pose2, Vec2};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LfhcpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidInput = 3,
    OutOfRange = 4,
    BufferTooSmall = 5,
    Internal = 6,
    Panic = 7,
}

/// A motion plan in its start frame.
pub struct LfhcpPlan(Plan);

/// Filtered critical points for one plan.
pub struct LfhcpCriticalSet(FilterReport);

/// Obstacle scenarios sampled for one plan.
pub struct LfhcpScenarios(Vec<Scenario>);

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LfhcpCriticalPoint {
    pub x: f64,
    pub y: f64,
    /// 1-based timestep.
    pub t_crit: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LfhcpCircle {
    pub x: f64,
    pub y: f64,
    pub radius: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LfhcpFeature {
    pub r: f64,
    pub theta: f64,
    pub s: f64,
    pub psi: f64,
}

/// Iteration counts and size of a hallucination run. Zero fields take the
/// reduced defaults.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LfhcpHallucinationOptions {
    pub n_obstacles: usize,
    pub phase1_iters: usize,
    pub phase2_anneal_iters: usize,
    pub phase2_hard_iters: usize,
    pub n_max: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).expect("nul bytes removed"));
}

fn status_of(e: &Error) -> LfhcpStatus {
    match e.exit_code() {
        2 => LfhcpStatus::InvalidInput,
        _ => LfhcpStatus::Internal,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (LfhcpStatus, String)>) -> LfhcpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            LfhcpStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside lfhcp");
            LfhcpStatus::Panic
        }
    }
}

fn fail(e: Error) -> (LfhcpStatus, String) {
    (status_of(&e), e.to_string())
}

fn null() -> (LfhcpStatus, String) {
    (LfhcpStatus::NullPointer, "null pointer argument".into())
}

unsafe fn slice<'a, T>(p: *const T, n: usize) -> Result<&'a [T], (LfhcpStatus, String)> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null());
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), (LfhcpStatus, String)> {
    if out.is_null() {
        return Err(null());
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn get<'a, T>(p: *const T) -> Result<&'a T, (LfhcpStatus, String)> {
    p.as_ref().ok_or_else(null)
}

/// NUL-terminated library version; static storage.
#[no_mangle]
pub extern "C" fn lfhcp_version() -> *const c_char {
    static V: &CStr = match CStr::from_bytes_with_nul(concat!(env!("CARGO_PKG_VERSION"), "\0").as_bytes()) {
        Ok(v) => v,
        Err(_) => panic!("version string"),
    };
    V.as_ptr()
}

/// Message for the calling thread's most recent failure, empty after success.
/// Valid until the next lfhcp call on the same thread.
#[no_mangle]
pub extern "C" fn lfhcp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Builds a plan from `n` waypoints starting at the origin.
#[no_mangle]
pub unsafe extern "C" fn lfhcp_plan_from_positions(
    xs: *const f64,
    ys: *const f64,
    n: usize,
    dt: f64,
    out: *mut *mut LfhcpPlan,
) -> LfhcpStatus {
    guard(|| {
        let (xs, ys) = (slice(xs, n)?, slice(ys, n)?);
        let q: Vec<Vec2> = xs.iter().zip(ys).map(|(&x, &y)| Vec2::new(x, y)).collect();
        let plan = Plan::from_positions(&q, dt).map_err(|e| fail(e.into()))?;
        put(out, LfhcpPlan(plan))
    })
}

/// Poses in the plan; 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn lfhcp_plan_horizon(plan: *const LfhcpPlan) -> usize {
    plan.as_ref().map_or(0, |p| p.0.horizon())
}

#[no_mangle]
pub unsafe extern "C" fn lfhcp_plan_free(plan: *mut LfhcpPlan) {
    if !plan.is_null() {
        drop(Box::from_raw(plan));
    }
}

/// Two-phase fit followed by the greedy filter. `options` may be null.
#[no_mangle]
pub unsafe extern "C" fn lfhcp_hallucinate(
    plan: *const LfhcpPlan,
    options: *const LfhcpHallucinationOptions,
    seed: u64,
    out: *mut *mut LfhcpCriticalSet,
) -> LfhcpStatus {
    guard(|| {
        let plan = &get(plan)?.0;
        let mut cfg = HallucinationConfig::reduced();
        let mut n_max = lfhcp::filter::DEFAULT_N_MAX;
        if let Some(o) = options.as_ref() {
            let pick = |v: usize, d: usize| if v == 0 { d } else { v };
            cfg.n_obstacles = pick(o.n_obstacles, cfg.n_obstacles);
            cfg.phase1_iters = pick(o.phase1_iters, cfg.phase1_iters);
            cfg.phase2_anneal_iters = pick(o.phase2_anneal_iters, cfg.phase2_anneal_iters);
            cfg.phase2_hard_iters = pick(o.phase2_hard_iters, cfg.phase2_hard_iters);
            n_max = pick(o.n_max, n_max);
        }
        let mut rng = rng_from_seed(seed);
        let mut run = || -> lfhcp::Result<FilterReport> {
            let (h, _) = fit_phase1(plan, &cfg, &mut rng)?;
            let (h, _) = fit_phase2(plan, &h, &cfg, &mut rng)?;
            let cands = extract_critical_points(&h, &mut rng, 1);
            filter_critical_points(&cands, plan, cfg.radius, &cfg.decoder, n_max)
        };
        put(out, LfhcpCriticalSet(run().map_err(fail)?))
    })
}

/// Wraps caller-supplied critical points as an accepted set.
#[no_mangle]
pub unsafe extern "C" fn lfhcp_critical_set_new(
    points: *const LfhcpCriticalPoint,
    n: usize,
    out: *mut *mut LfhcpCriticalSet,
) -> LfhcpStatus {
    guard(|| {
        let kept = slice(points, n)?
            .iter()
            .map(|p| lfhcp::hallucinator::CriticalPoint { x: p.x, y: p.y, t_crit: p.t_crit })
            .collect();
        let report = FilterReport {
            kept,
            baseline_loss: 0.0,
            final_loss: 0.0,
            per_obstacle_reduction: Vec::new(),
            loss_trace: Vec::new(),
            accepted: true,
            open_space: false,
        };
        put(out, LfhcpCriticalSet(report))
    })
}

#[no_mangle]
pub unsafe extern "C" fn lfhcp_critical_set_len(set: *const LfhcpCriticalSet) -> usize {
    set.as_ref().map_or(0, |s| s.0.kept.len())
}

/// 1 when the filter accepted the plan, 0 otherwise or for a null handle.
#[no_mangle]
pub unsafe extern "C" fn lfhcp_critical_set_accepted(set: *const LfhcpCriticalSet) -> i32 {
    set.as_ref().map_or(0, |s| s.0.accepted as i32)
}

#[no_mangle]
pub unsafe extern "C" fn lfhcp_critical_set_get(
    set: *const LfhcpCriticalSet,
    index: usize,
    out: *mut LfhcpCriticalPoint,
) -> LfhcpStatus {
    guard(|| {
        let set = get(set)?;
        let p = set.0.kept.get(index).ok_or((LfhcpStatus::OutOfRange, format!("index {index} out of range")))?;
        if out.is_null() {
            return Err(null());
        }
        *out = LfhcpCriticalPoint { x: p.x, y: p.y, t_crit: p.t_crit };
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn lfhcp_critical_set_free(set: *mut LfhcpCriticalSet) {
    if !set.is_null() {
        drop(Box::from_raw(set));
    }
}

/// Samples up to `count` scenarios through the kept points (default speed
/// bounds and radii, no clutter).
#[no_mangle]
pub unsafe extern "C" fn lfhcp_generate(
    plan: *const LfhcpPlan,
    set: *const LfhcpCriticalSet,
    count: usize,
    seed: u64,
    out: *mut *mut LfhcpScenarios,
) -> LfhcpStatus {
    guard(|| {
        let (plan, set) = (&get(plan)?.0, &get(set)?.0);
        let cfg = GeneratorConfig { scenarios_per_plan: count, ..Default::default() };
        let g = generate_scenarios("ffi", plan, &set.kept, &cfg, &mut rng_from_seed(seed)).map_err(fail)?;
        put(out, LfhcpScenarios(g.scenarios))
    })
}

#[no_mangle]
pub unsafe extern "C" fn lfhcp_scenarios_len(s: *const LfhcpScenarios) -> usize {
    s.as_ref().map_or(0, |s| s.0.len())
}

#[no_mangle]
pub unsafe extern "C" fn lfhcp_scenario_obstacles(s: *const LfhcpScenarios, scenario: usize) -> usize {
    s.as_ref().and_then(|s| s.0.get(scenario)).map_or(0, |s| s.all().count())
}

/// Centre of one obstacle at 1-based timestep `t`.
#[no_mangle]
pub unsafe extern "C" fn lfhcp_scenario_position(
    s: *const LfhcpScenarios,
    scenario: usize,
    obstacle: usize,
    t: usize,
    x: *mut f64,
    y: *mut f64,
) -> LfhcpStatus {
    guard(|| {
        let s = get(s)?;
        let traj = s
            .0
            .get(scenario)
            .and_then(|sc| sc.all().nth(obstacle))
            .ok_or((LfhcpStatus::OutOfRange, "scenario or obstacle out of range".into()))?;
        if x.is_null() || y.is_null() {
            return Err(null());
        }
        let c = traj.position(t);
        *x = c.x;
        *y = c.y;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn lfhcp_scenarios_free(s: *mut LfhcpScenarios) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// Ranges for `beams` beams spread over `fov` around `heading`, written to
/// `ranges`, which must hold `beams` values.
#[no_mangle]
pub unsafe extern "C" fn lfhcp_raycast(
    x: f64,
    y: f64,
    heading: f64,
    circles: *const LfhcpCircle,
    n: usize,
    beams: usize,
    fov: f64,
    max_range: f64,
    ranges: *mut f64,
    capacity: usize,
) -> LfhcpStatus {
    guard(|| {
        if capacity < beams {
            return Err((LfhcpStatus::BufferTooSmall, format!("need {beams} slots, got {capacity}")));
        }
        if ranges.is_null() {
            return Err(null());
        }
        let obstacles = slice(circles, n)?
            .iter()
            .map(|c| Obstacle::new(Vec2::new(c.x, c.y), c.radius))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| fail(e.into()))?;
        let lidar = LidarConfig { beams, fov, max_range, range_noise_sigma: 0.0 };
        let scan = raycast(&Pose2::new(x, y, heading), &obstacles, &lidar).map_err(|e| fail(e.into()))?;
        std::slice::from_raw_parts_mut(ranges, beams).copy_from_slice(&scan.ranges);
        Ok(())
    })
}

/// Coverage score in [0, 1] under the default bins. `subset_mask` bits are
/// r = 1, theta = 2, s = 4, psi = 8.
#[no_mangle]
pub unsafe extern "C" fn lfhcp_dcs(samples: *const LfhcpFeature, n: usize, subset_mask: u8, out: *mut f64) -> LfhcpStatus {
    guard(|| {
        let subset = Subset::new(subset_mask)
            .ok_or((LfhcpStatus::InvalidArgument, format!("subset mask {subset_mask} is not in 1..=15")))?;
        let s: Vec<FeatureSample> =
            slice(samples, n)?.iter().map(|f| FeatureSample { r: f.r, theta: f.theta, s: f.s, psi: f.psi }).collect();
        if out.is_null() {
            return Err(null());
        }
        *out = dcs(&s, &CoverageConfig::default(), subset);
        Ok(())
    })
}

/// Success percentage rounded to two decimals, written as text (e.g. "30.83%").
#[no_mangle]
pub unsafe extern "C" fn lfhcp_format_success_rate(
    successes: usize,
    total: usize,
    buf: *mut c_char,
    capacity: usize,
) -> LfhcpStatus {
    guard(|| {
        if successes > total || total == 0 {
            return Err((LfhcpStatus::InvalidArgument, "need 0 <= successes <= total, total > 0".into()));
        }
        let text = Rate { successes, total }.to_string();
        if capacity < text.len() + 1 {
            return Err((LfhcpStatus::BufferTooSmall, format!("need {} bytes", text.len() + 1)));
        }
        if buf.is_null() {
            return Err(null());
        }
        ptr::copy_nonoverlapping(text.as_ptr().cast::<c_char>(), buf, text.len());
        *buf.add(text.len()) = 0;
        Ok(())
    })
}
