use std::ffi::CStr;
use std::path::Path;
use std::ptr;

use lfhcp_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(lfhcp_last_error()) }.to_string_lossy().into_owned()
}

fn line_plan(n: usize, length: f64) -> *mut LfhcpPlan {
    let xs: Vec<f64> = (0..n).map(|i| length * i as f64 / (n - 1) as f64).collect();
    let ys = vec![0.0; n];
    let mut plan = ptr::null_mut();
    let st = unsafe { lfhcp_plan_from_positions(xs.as_ptr(), ys.as_ptr(), n, 0.05, &mut plan) };
    assert_eq!(st, LfhcpStatus::Ok);
    plan
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(lfhcp_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn raycast_hits_and_reports_small_buffers() {
    let circle = LfhcpCircle { x: 2.0, y: 0.0, radius: 0.5 };
    let mut ranges = [0.0; 4];
    let st = unsafe { lfhcp_raycast(0.0, 0.0, 0.0, &circle, 1, 4, std::f64::consts::TAU, 10.0, ranges.as_mut_ptr(), 4) };
    assert_eq!(st, LfhcpStatus::Ok);
    assert!((ranges[2] - 1.5).abs() < 1e-12);
    assert_eq!(ranges[0], 10.0);
    let st = unsafe { lfhcp_raycast(0.0, 0.0, 0.0, &circle, 1, 4, std::f64::consts::TAU, 10.0, ranges.as_mut_ptr(), 3) };
    assert_eq!(st, LfhcpStatus::BufferTooSmall);
    assert!(last_error().contains("need 4"));
    let bad = LfhcpCircle { radius: -1.0, ..circle };
    let st = unsafe { lfhcp_raycast(0.0, 0.0, 0.0, &bad, 1, 4, 1.0, 10.0, ranges.as_mut_ptr(), 4) };
    assert_eq!(st, LfhcpStatus::InvalidInput);
}

#[test]
fn null_and_invalid_arguments() {
    let st = unsafe { lfhcp_plan_from_positions(ptr::null(), ptr::null(), 3, 0.1, ptr::null_mut()) };
    assert_eq!(st, LfhcpStatus::NullPointer);
    assert!(!last_error().is_empty());
    let xs = [1.0, 2.0];
    let ys = [0.0, 0.0];
    let mut plan = ptr::null_mut();
    let st = unsafe { lfhcp_plan_from_positions(xs.as_ptr(), ys.as_ptr(), 2, 0.1, &mut plan) };
    assert_eq!(st, LfhcpStatus::InvalidInput);
    assert!(plan.is_null());
    assert_eq!(unsafe { lfhcp_plan_horizon(ptr::null()) }, 0);
    unsafe { lfhcp_plan_free(ptr::null_mut()) };
}

#[test]
fn generated_trajectories_pass_through_critical_points() {
    let plan = line_plan(60, 3.0);
    assert_eq!(unsafe { lfhcp_plan_horizon(plan) }, 60);
    let points = [
        LfhcpCriticalPoint { x: 1.5, y: 1.2, t_crit: 30 },
        LfhcpCriticalPoint { x: 2.5, y: -1.4, t_crit: 45 },
    ];
    let mut set = ptr::null_mut();
    assert_eq!(unsafe { lfhcp_critical_set_new(points.as_ptr(), 2, &mut set) }, LfhcpStatus::Ok);
    assert_eq!(unsafe { lfhcp_critical_set_len(set) }, 2);
    let mut back = LfhcpCriticalPoint { x: 0.0, y: 0.0, t_crit: 0 };
    assert_eq!(unsafe { lfhcp_critical_set_get(set, 1, &mut back) }, LfhcpStatus::Ok);
    assert_eq!(back, points[1]);
    assert_eq!(unsafe { lfhcp_critical_set_get(set, 2, &mut back) }, LfhcpStatus::OutOfRange);

    let mut scen = ptr::null_mut();
    assert_eq!(unsafe { lfhcp_generate(plan, set, 10, 7, &mut scen) }, LfhcpStatus::Ok);
    let n = unsafe { lfhcp_scenarios_len(scen) };
    assert!(n > 0 && n <= 10);
    for s in 0..n {
        assert_eq!(unsafe { lfhcp_scenario_obstacles(scen, s) }, 2);
        for (i, p) in points.iter().enumerate() {
            let (mut x, mut y) = (0.0, 0.0);
            assert_eq!(unsafe { lfhcp_scenario_position(scen, s, i, p.t_crit, &mut x, &mut y) }, LfhcpStatus::Ok);
            assert_eq!((x, y), (p.x, p.y));
        }
    }
    unsafe {
        lfhcp_scenarios_free(scen);
        lfhcp_critical_set_free(set);
        lfhcp_plan_free(plan);
    }
}

#[test]
fn straight_plan_hallucination_is_rejected() {
    let plan = line_plan(30, 1.0);
    let opts = LfhcpHallucinationOptions {
        n_obstacles: 2,
        phase1_iters: 3,
        phase2_anneal_iters: 3,
        phase2_hard_iters: 2,
        n_max: 0,
    };
    let mut set = ptr::null_mut();
    assert_eq!(unsafe { lfhcp_hallucinate(plan, &opts, 1, &mut set) }, LfhcpStatus::Ok);
    assert_eq!(unsafe { lfhcp_critical_set_len(set) }, 0);
    assert_eq!(unsafe { lfhcp_critical_set_accepted(set) }, 0);
    unsafe {
        lfhcp_critical_set_free(set);
        lfhcp_plan_free(plan);
    }
}

#[test]
fn coverage_and_rates() {
    let f = LfhcpFeature { r: 1.0, theta: 0.0, s: 1.5, psi: 0.0 };
    let mut out = 0.0;
    assert_eq!(unsafe { lfhcp_dcs(&f, 1, 1, &mut out) }, LfhcpStatus::Ok);
    assert!((out - 1.0 / 19.0).abs() < 1e-15);
    assert_eq!(unsafe { lfhcp_dcs(&f, 1, 0, &mut out) }, LfhcpStatus::InvalidArgument);

    let mut buf = [0 as std::ffi::c_char; 16];
    assert_eq!(unsafe { lfhcp_format_success_rate(37, 120, buf.as_mut_ptr(), buf.len()) }, LfhcpStatus::Ok);
    assert_eq!(unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap(), "30.83%");
    assert_eq!(unsafe { lfhcp_format_success_rate(27, 120, buf.as_mut_ptr(), buf.len()) }, LfhcpStatus::Ok);
    assert_eq!(unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap(), "22.50%");
    assert_eq!(unsafe { lfhcp_format_success_rate(1, 3, buf.as_mut_ptr(), 4) }, LfhcpStatus::BufferTooSmall);
}

#[test]
fn header_declares_the_api_and_compiles() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/lfhcp.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in ["lfhcp_raycast", "lfhcp_hallucinate", "lfhcp_generate", "LFHCP_STATUS_OK", "typedef struct LfhcpPlan LfhcpPlan"] {
        assert!(text.contains(name), "{name} missing from header");
    }
    // Compile-check the header when a C compiler is around.
    if let Ok(out) = std::process::Command::new("cc").args(["-fsyntax-only", "-x", "c"]).arg(&header).output() {
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn c_program_links_against_the_static_library() {
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().and_then(Path::parent).unwrap();
    let lib = profile_dir.join("liblfhcp_ffi.a");
    let crate_dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    if !lib.exists() || std::process::Command::new("cc").arg("--version").output().is_err() {
        eprintln!("skipping: no C compiler or static library");
        return;
    }
    let bin = std::env::temp_dir().join(format!("lfhcp_ffi_smoke_{}", std::process::id()));
    let status = std::process::Command::new("cc")
        .arg(crate_dir.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(crate_dir.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success());
    let out = std::process::Command::new(&bin).output().unwrap();
    let _ = std::fs::remove_file(&bin);
    assert!(out.status.success(), "exit {:?}", out.status.code());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok "));
}
