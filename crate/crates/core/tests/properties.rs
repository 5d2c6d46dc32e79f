use std::f64::consts::PI;

use lfhcp::coverage::{dcs, CoverageConfig, FeatureSample, Subset};
use lfhcp::decoder::{straight_line_plan, TemporalMask};
use lfhcp::filter::greedy_select;
use lfhcp::generator::{sample_trajectory, GeneratorConfig};
use lfhcp::geometry::{
    min_clearance, normalize_angle, ray_circle, raycast, LidarConfig, Obstacle, Pose2, Vec2, DEFAULT_DT,
};
use lfhcp::hallucinator::CriticalPoint;
use lfhcp::seed::rng_from_seed;
use lfhcp::sim::{Arena, ObstacleSpec, ObstacleState};
use proptest::prelude::*;

fn vec2(range: f64) -> impl Strategy<Value = Vec2> {
    (-range..range, -range..range).prop_map(|(x, y)| Vec2::new(x, y))
}

fn obstacles() -> impl Strategy<Value = Vec<Obstacle>> {
    prop::collection::vec((vec2(6.0), 0.1..1.0f64), 0..6)
        .prop_map(|v| v.into_iter().map(|(c, r)| Obstacle::new(c, r).unwrap()).collect())
}

proptest! {
    #[test]
    fn raycast_is_rotation_equivariant(obs in obstacles(), heading in -PI..PI, turn in -PI..PI) {
        let cfg = LidarConfig { beams: 64, ..LidarConfig::default() };
        let a = raycast(&Pose2::new(0.0, 0.0, heading), &obs, &cfg).unwrap();
        let rotated: Vec<Obstacle> = obs.iter().map(|o| Obstacle::new(o.center.rotate(turn), o.radius).unwrap()).collect();
        let b = raycast(&Pose2::new(0.0, 0.0, heading + turn), &rotated, &cfg).unwrap();
        prop_assert_eq!(a.origin_inside, b.origin_inside);
        for (x, y) in a.ranges.iter().zip(&b.ranges) {
            prop_assert!((x - y).abs() < 1e-7, "{} vs {}", x, y);
        }
    }

    #[test]
    fn ray_circle_matches_ray_marching(
        origin in vec2(5.0),
        center in vec2(5.0),
        radius in 0.2..1.5f64,
        aim in -0.9..0.9f64,
    ) {
        prop_assume!(origin.distance(center) > radius + 0.01);
        // Aim so the impact parameter is `aim * radius`: a clean hit.
        let to_c = center - origin;
        let off = (aim * radius / to_c.norm()).asin();
        let dir = to_c.normalized().unwrap().rotate(off);
        let t = ray_circle(origin, dir, center, radius).expect("aimed inside the circle");
        let step = 1e-4;
        let mut s = 0.0;
        while (origin + dir * s).distance(center) > radius {
            s += step;
        }
        prop_assert!((s - t).abs() <= step + 1e-9, "marched {} analytic {}", s, t);
    }

    #[test]
    fn ray_circle_misses_behind_and_beside(origin in vec2(5.0), center in vec2(5.0), radius in 0.1..1.0f64) {
        prop_assume!(origin.distance(center) > radius + 0.01);
        let away = (origin - center).normalized().unwrap();
        prop_assert_eq!(ray_circle(origin, away, center, radius), None);
    }

    #[test]
    fn min_clearance_is_translation_invariant(
        pts in prop::collection::vec((vec2(5.0), vec2(5.0)), 1..40),
        shift in vec2(100.0),
        r in 0.0..1.0f64,
    ) {
        let poses: Vec<Pose2> = pts.iter().map(|(p, _)| Pose2::from_position(*p, 0.3)).collect();
        let traj: Vec<Vec2> = pts.iter().map(|(_, q)| *q).collect();
        let moved_poses: Vec<Pose2> = poses.iter().map(|p| Pose2::from_position(p.position() + shift, 0.3)).collect();
        let moved_traj: Vec<Vec2> = traj.iter().map(|q| *q + shift).collect();
        let a = min_clearance(&poses, &traj, r, 0.2).unwrap();
        let b = min_clearance(&moved_poses, &moved_traj, r, 0.2).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn normalize_angle_is_idempotent(a in -1e4..1e4f64) {
        let n = normalize_angle(a).unwrap();
        prop_assert!((-PI..PI).contains(&n));
        prop_assert_eq!(normalize_angle(n).unwrap(), n);
        prop_assert!(((a - n) / (2.0 * PI) - ((a - n) / (2.0 * PI)).round()).abs() < 1e-9);
    }

    #[test]
    fn pose_relative_inverts_compose(x in -5.0..5.0f64, y in -5.0..5.0f64, h in -PI..PI, ox in -5.0..5.0f64, oy in -5.0..5.0f64, oh in -PI..PI) {
        let base = Pose2::new(x, y, h);
        let other = Pose2::new(ox, oy, oh);
        let back = base.relative(&base.compose(&other));
        prop_assert!((back.x - ox).abs() < 1e-9 && (back.y - oy).abs() < 1e-9);
        prop_assert!(normalize_angle(back.heading() - oh).unwrap().abs() < 1e-9);
    }

    #[test]
    fn reflection_conserves_speed(
        start in (0.5..9.5f64, 0.5..9.5f64),
        speed in 0.0..3.0f64,
        heading in -PI..PI,
        steps in 1usize..400,
    ) {
        let arena = Arena { min: Vec2::ZERO, max: Vec2::new(10.0, 10.0) };
        let spec = ObstacleSpec { position: Vec2::new(start.0, start.1), speed, heading, radius: 0.3, wobble: None };
        let mut s = ObstacleState::new(&spec);
        let dt = 0.05;
        for k in 0..steps {
            s.step(&arena, k as f64 * dt, dt);
            prop_assert!((s.velocity(k as f64 * dt).norm() - speed).abs() < 1e-9);
            let p = s.position;
            prop_assert!(p.x >= 0.3 - 1e-9 && p.x <= 9.7 + 1e-9 && p.y >= 0.3 - 1e-9 && p.y <= 9.7 + 1e-9);
        }
    }

    #[test]
    fn generated_trajectory_hits_its_critical_point(
        goal in (1.0..5.0f64, -2.0..2.0f64),
        h in 5usize..120,
        frac in 0.0..1.0f64,
        side in (0.8..3.0f64, -PI..PI),
        seed in any::<u64>(),
    ) {
        let plan = straight_line_plan(Vec2::from_polar(goal.0, goal.1), h, DEFAULT_DT).unwrap();
        let t_crit = 1 + ((h - 1) as f64 * frac) as usize;
        let p = plan.poses()[t_crit - 1].position() + Vec2::from_polar(side.0, side.1);
        let cp = CriticalPoint { x: p.x, y: p.y, t_crit };
        let cfg = GeneratorConfig::default();
        if let Ok(traj) = sample_trajectory(&cp, &plan, &cfg, &mut rng_from_seed(seed)) {
            prop_assert_eq!(traj.position(t_crit), cp.position());
            prop_assert!(traj.clearance(&plan, cfg.robot_radius) >= 0.0);
            let s = traj.speed();
            prop_assert!((1.0 - 1e-12..=2.0 + 1e-12).contains(&s));
        }
    }

    #[test]
    fn dcs_is_monotone_under_inclusion(
        values in prop::collection::vec((0.0..2.5f64, -180.0..180.0f64, 0.8..2.2f64, -180.0..180.0f64), 0..300),
        cut in 0.0..1.0f64,
    ) {
        let samples: Vec<FeatureSample> =
            values.iter().map(|&(r, theta, s, psi)| FeatureSample { r, theta, s, psi }).collect();
        let k = (samples.len() as f64 * cut) as usize;
        let cfg = CoverageConfig::default();
        for subset in Subset::all() {
            let small = dcs(&samples[..k], &cfg, subset);
            let big = dcs(&samples, &cfg, subset);
            prop_assert!(small <= big);
            prop_assert!((0.0..=1.0).contains(&big));
        }
    }

    #[test]
    fn subset_coverage_bounds_superset_coverage(
        values in prop::collection::vec((0.15..2.0f64, -180.0..180.0f64, 1.0..2.0f64, -180.0..180.0f64), 1..200),
    ) {
        // With every sample in range, occupied joint bins project onto occupied marginal bins.
        let samples: Vec<FeatureSample> =
            values.iter().map(|&(r, theta, s, psi)| FeatureSample { r, theta, s, psi }).collect();
        let cfg = CoverageConfig::default();
        for a in Subset::all() {
            for b in Subset::all() {
                if a.contains(b) {
                    let occ = |s: Subset| (dcs(&samples, &cfg, s) * cfg.total_bins(s) as f64).round();
                    prop_assert!(occ(a) >= occ(b));
                }
            }
        }
    }

    #[test]
    fn greedy_loss_trace_is_non_increasing(
        weights in prop::collection::vec(0.0..1.0f64, 1..12),
        baseline in 0.1..10.0f64,
        n_max in 1usize..10,
    ) {
        // Each candidate removes a fixed share of whatever loss remains.
        let loss = |set: &[usize]| Ok(set.iter().fold(baseline, |l, &i| l * (1.0 - weights[i])));
        let s = greedy_select(weights.len(), baseline, n_max, loss).unwrap();
        prop_assert!(s.kept.len() <= n_max);
        prop_assert!(s.loss_trace.windows(2).all(|w| w[1] <= w[0]));
        prop_assert_eq!(s.loss_trace.len(), s.kept.len() + 1);
        prop_assert!(s.per_obstacle_reduction.iter().all(|&(_, r)| r >= 0.01));
        prop_assert_eq!(s.accepted, s.final_loss <= 0.1 * baseline);
        let mut sorted = s.kept.clone();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), s.kept.len());
    }

    #[test]
    fn one_hot_mask_argmax(h in 1usize..300, frac in 0.0..1.0f64) {
        let i = ((h - 1) as f64 * frac) as usize;
        let m = TemporalMask::one_hot(h, i);
        prop_assert_eq!(m.argmax(), i);
        prop_assert_eq!(m.values().iter().sum::<f64>(), 1.0);
    }
}
