#![allow(dead_code)]

use lfhcp::decoder::{decode_static, DecoderConfig};
use lfhcp::geometry::{Obstacle, Plan, Vec2, DEFAULT_DT};

/// Plan decoded around one planted obstacle (radius 0.5). Returns the plan
/// and the planted centre. Cases 0..10 sweep goal bearing; higher cases also
/// lengthen the goal.
pub fn planted_fixture(case: usize, horizon: usize) -> (Plan, Vec2) {
    let k = case % 10;
    let ang = -0.6 + 1.2 * k as f64 / 9.0;
    let len = 2.5 + 0.2 * (k % 4) as f64 + 0.3 * (case / 10) as f64;
    let goal = Vec2::from_polar(len, ang);
    let dir = goal.normalized().expect("non-zero goal");
    let side = if case.is_multiple_of(2) { 1.0 } else { -1.0 };
    let c = dir * (len * (0.4 + 0.05 * (k % 3) as f64)) + Vec2::new(-dir.y, dir.x) * (0.15 * side);
    let planted = Obstacle::new(c, 0.5).expect("valid obstacle");
    let plan = decode_static(&[planted], goal, horizon, DEFAULT_DT, &DecoderConfig::default())
        .expect("fixture decodes")
        .plan;
    (plan, c)
}

/// Odometry CSV (`t,x,y,heading`) tracing `plan` at its own period.
pub fn odometry_csv(plan: &Plan) -> String {
    let mut out = String::from("t,x,y,heading\n");
    for (k, p) in plan.poses().iter().enumerate() {
        out.push_str(&format!("{},{},{},{}\n", k as f64 * plan.dt(), p.x, p.y, p.heading()));
    }
    out
}
