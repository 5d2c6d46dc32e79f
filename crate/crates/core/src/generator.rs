//! Constant-velocity obstacle trajectories through critical points, plus
//! random clutter, all kept clear of the plan they were generated for.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{min_clearance, Obstacle, Plan, Vec2, DEFAULT_ROBOT_RADIUS};
use crate::hallucinator::CriticalPoint;

/// Disc moving at constant velocity, at `anchor` on timestep `t_crit` (1-based).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObstacleTrajectory {
    pub anchor: Vec2,
    pub velocity: Vec2,
    pub t_crit: usize,
    pub radius: f64,
    pub dt: f64,
}

impl ObstacleTrajectory {
    /// Centre at 1-based timestep `t`.
    pub fn position(&self, t: usize) -> Vec2 {
        if t == self.t_crit {
            return self.anchor;
        }
        let k = t as f64 - self.t_crit as f64;
        self.anchor + self.velocity * (k * self.dt)
    }

    /// Centres for `t = 1..=horizon`.
    pub fn positions(&self, horizon: usize) -> Vec<Vec2> {
        (1..=horizon).map(|t| self.position(t)).collect()
    }

    pub fn obstacle_at(&self, t: usize) -> Obstacle {
        Obstacle { center: self.position(t), radius: self.radius }
    }

    pub fn speed(&self) -> f64 {
        self.velocity.norm()
    }

    /// Signed clearance against the robot following `plan`.
    pub fn clearance(&self, plan: &Plan, robot_radius: f64) -> f64 {
        min_clearance(plan.poses(), &self.positions(plan.horizon()), self.radius, robot_radius)
            .expect("positions span the plan horizon")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub speed_bounds: (f64, f64),
    pub scenarios_per_plan: usize,
    pub max_attempts: usize,
    pub robot_radius: f64,
    pub obstacle_radius: f64,
    pub max_random_obstacles: usize,
    /// Plans are also treated as open-space when their mean speed exceeds
    /// this and they head at the goal often enough.
    pub open_space_speed: f64,
    pub open_space_cos: f64,
    pub open_space_fraction: f64,
    /// Margin added around the plan's bounding box for clutter anchors (m).
    pub augment_margin: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            speed_bounds: (1.0, 2.0),
            scenarios_per_plan: 50,
            max_attempts: 100,
            robot_radius: DEFAULT_ROBOT_RADIUS,
            obstacle_radius: 0.5,
            max_random_obstacles: 20,
            open_space_speed: 0.9,
            open_space_cos: 0.9,
            open_space_fraction: 0.9,
            augment_margin: 2.0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.speed_bounds;
        let bad = |m: &str| Err(Error::Config(format!("generator: {m}")));
        if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi) {
            return bad("speed bounds must satisfy 0 <= lower <= upper");
        }
        if self.scenarios_per_plan == 0 || self.max_attempts == 0 {
            return bad("counts must be at least 1");
        }
        if !(self.obstacle_radius > 0.0 && self.robot_radius >= 0.0 && self.augment_margin >= 0.0) {
            return bad("radii and margins must be non-negative");
        }
        Ok(())
    }
}

/// Obstacle sequences for one plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub plan_id: String,
    pub trajectories: Vec<ObstacleTrajectory>,
    pub augmented: Vec<ObstacleTrajectory>,
}

impl Scenario {
    pub fn all(&self) -> impl Iterator<Item = &ObstacleTrajectory> {
        self.trajectories.iter().chain(&self.augmented)
    }

    /// Obstacle discs at 1-based timestep `t`.
    pub fn obstacles_at(&self, t: usize) -> Vec<Obstacle> {
        self.all().map(|o| o.obstacle_at(t)).collect()
    }
}

fn random_velocity<R: Rng + ?Sized>(config: &GeneratorConfig, rng: &mut R) -> Vec2 {
    let (lo, hi) = config.speed_bounds;
    let speed = if hi > lo { rng.random_range(lo..hi) } else { lo };
    let heading = rng.random_range(-PI..PI);
    Vec2::from_polar(speed, heading)
}

pub fn sample_trajectory<R: Rng + ?Sized>(
    cp: &CriticalPoint,
    plan: &Plan,
    config: &GeneratorConfig,
    rng: &mut R,
) -> Result<ObstacleTrajectory> {
    if cp.t_crit == 0 || cp.t_crit > plan.horizon() {
        return Err(Error::InvalidInput(format!(
            "critical time {} outside horizon 1..={}",
            cp.t_crit,
            plan.horizon()
        )));
    }
    for _ in 0..config.max_attempts {
        let traj = ObstacleTrajectory {
            anchor: cp.position(),
            velocity: random_velocity(config, rng),
            t_crit: cp.t_crit,
            radius: config.obstacle_radius,
            dt: plan.dt(),
        };
        if traj.clearance(plan, config.robot_radius) >= 0.0 {
            return Ok(traj);
        }
    }
    Err(Error::SampleExhausted { x: cp.x, y: cp.y, t_crit: cp.t_crit, attempts: config.max_attempts })
}

/// Scenarios for one plan plus the number dropped because a critical point
/// could not be cleared.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Generated {
    pub scenarios: Vec<Scenario>,
    pub dropped: usize,
}

pub fn generate_scenarios<R: Rng + ?Sized>(
    plan_id: &str,
    plan: &Plan,
    kept: &[CriticalPoint],
    config: &GeneratorConfig,
    rng: &mut R,
) -> Result<Generated> {
    config.validate()?;
    let mut out = Generated::default();
    if kept.is_empty() {
        return Ok(out);
    }
    'scenario: for _ in 0..config.scenarios_per_plan {
        let mut trajectories = Vec::with_capacity(kept.len());
        for cp in kept {
            match sample_trajectory(cp, plan, config, rng) {
                Ok(t) => trajectories.push(t),
                Err(Error::SampleExhausted { .. }) => {
                    out.dropped += 1;
                    continue 'scenario;
                }
                Err(e) => return Err(e),
            }
        }
        out.scenarios.push(Scenario { plan_id: plan_id.to_string(), trajectories, augmented: Vec::new() });
    }
    Ok(out)
}

/// Adds up to `max_random_obstacles` clutter trajectories that keep clear of
/// the plan. Draws that fail `max_attempts` times are skipped.
pub fn augment_random_obstacles<R: Rng + ?Sized>(
    scenario: &Scenario,
    plan: &Plan,
    config: &GeneratorConfig,
    rng: &mut R,
) -> Scenario {
    let mut out = scenario.clone();
    if config.max_random_obstacles == 0 {
        return out;
    }
    let k = rng.random_range(0..=config.max_random_obstacles);
    let (lo, hi) = plan.bounds();
    let m = config.augment_margin;
    let h = plan.horizon();
    for _ in 0..k {
        for _ in 0..config.max_attempts {
            let anchor = Vec2::new(rng.random_range(lo.x - m..=hi.x + m), rng.random_range(lo.y - m..=hi.y + m));
            let traj = ObstacleTrajectory {
                anchor,
                velocity: random_velocity(config, rng),
                t_crit: rng.random_range(1..=h),
                radius: config.obstacle_radius,
                dt: plan.dt(),
            };
            if traj.clearance(plan, config.robot_radius) >= 0.0 {
                out.augmented.push(traj);
                break;
            }
        }
    }
    out
}

/// Mean speed and fraction of steps heading at the goal with cosine at least `cos_min`.
pub fn goal_alignment(plan: &Plan, cos_min: f64) -> (f64, f64) {
    let q = plan.positions();
    let goal = plan.goal().position();
    let steps = q.len().saturating_sub(1);
    if steps == 0 {
        return (0.0, 0.0);
    }
    let mut speed = 0.0;
    let mut aligned = 0usize;
    for w in q.windows(2) {
        let v = w[1] - w[0];
        speed += v.norm() / plan.dt();
        let to_goal = goal - w[0];
        // Zero-length steps count as misaligned.
        let cos = match (v.normalized(), to_goal.normalized()) {
            (Some(a), Some(b)) => a.dot(b),
            _ => 0.0,
        };
        if cos >= cos_min {
            aligned += 1;
        }
    }
    (speed / steps as f64, aligned as f64 / steps as f64)
}

/// Indices of plans that drive fast and straight at their goal.
pub fn select_open_space_plans(plans: &[Plan], config: &GeneratorConfig) -> Vec<usize> {
    plans
        .iter()
        .enumerate()
        .filter(|(_, p)| {
            let (speed, frac) = goal_alignment(p, config.open_space_cos);
            speed > config.open_space_speed && frac >= config.open_space_fraction
        })
        .map(|(i, _)| i)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::straight_line_plan;
    use crate::seed::rng_from_seed;

    fn line(goal: Vec2, h: usize, dt: f64) -> Plan {
        straight_line_plan(goal, h, dt).unwrap()
    }

    #[test]
    fn samples_hit_critical_point_within_speed_bounds() {
        let plan = line(Vec2::new(3.0, 0.0), 60, 0.05);
        let cfg = GeneratorConfig::default();
        let mut rng = rng_from_seed(4);
        let cp = CriticalPoint { x: 1.5, y: 1.2, t_crit: 30 };
        for _ in 0..200 {
            let t = sample_trajectory(&cp, &plan, &cfg, &mut rng).unwrap();
            assert_eq!(t.position(30), cp.position());
            assert!((1.0..=2.0).contains(&t.speed()));
            assert!(t.clearance(&plan, cfg.robot_radius) >= 0.0);
        }
    }

    #[test]
    fn critical_point_on_plan_exhausts() {
        let plan = line(Vec2::new(3.0, 0.0), 60, 0.05);
        let cfg = GeneratorConfig { max_attempts: 25, ..Default::default() };
        let cp = CriticalPoint { x: plan.poses()[29].x, y: 0.0, t_crit: 30 };
        let err = sample_trajectory(&cp, &plan, &cfg, &mut rng_from_seed(0)).unwrap_err();
        assert!(matches!(err, Error::SampleExhausted { t_crit: 30, attempts: 25, .. }));
    }

    #[test]
    fn scenario_counts() {
        let plan = line(Vec2::new(3.0, 0.0), 60, 0.05);
        let cfg = GeneratorConfig::default();
        let kept: Vec<CriticalPoint> =
            (0..3).map(|i| CriticalPoint { x: 0.8 * i as f64, y: 1.5, t_crit: 10 + 20 * i }).collect();
        let g = generate_scenarios("p", &plan, &kept, &cfg, &mut rng_from_seed(1)).unwrap();
        assert_eq!(g.dropped, 0);
        assert_eq!(g.scenarios.len(), 50);
        assert_eq!(g.scenarios.iter().map(|s| s.trajectories.len()).sum::<usize>(), 150);
        assert!(generate_scenarios("p", &plan, &[], &cfg, &mut rng_from_seed(1)).unwrap().scenarios.is_empty());
        let again = generate_scenarios("p", &plan, &kept, &cfg, &mut rng_from_seed(1)).unwrap();
        assert_eq!(g, again);
    }

    #[test]
    fn augmentation_bounds() {
        let plan = line(Vec2::new(3.0, 1.0), 60, 0.05);
        let base = Scenario { plan_id: "p".into(), trajectories: vec![], augmented: vec![] };
        let none = GeneratorConfig { max_random_obstacles: 0, ..Default::default() };
        assert_eq!(augment_random_obstacles(&base, &plan, &none, &mut rng_from_seed(0)), base);
        let cfg = GeneratorConfig::default();
        let mut rng = rng_from_seed(2);
        for _ in 0..50 {
            let s = augment_random_obstacles(&base, &plan, &cfg, &mut rng);
            assert!(s.augmented.len() <= 20);
            assert!(s.augmented.iter().all(|t| t.clearance(&plan, cfg.robot_radius) >= 0.0));
        }
    }

    #[test]
    fn open_space_selection() {
        let cfg = GeneratorConfig::default();
        let fast = line(Vec2::new(5.0, 0.0), 6, 1.0);
        let still = line(Vec2::ZERO, 6, 1.0);
        let away = Plan::from_positions(
            &(0..6).map(|i| Vec2::new(-1.5 * i as f64, 0.0)).chain([Vec2::new(3.0, 0.0)]).collect::<Vec<_>>(),
            1.0,
        )
        .unwrap();
        assert_eq!(select_open_space_plans(&[fast, still, away], &cfg), vec![0]);
    }
}
