//! LiDAR training records: sliding windows of scans and actions along a plan,
//! expressed in the frame of the window's anchor pose.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::Scenario;
use crate::geometry::{raycast, Action, LidarConfig, Obstacle, Plan, Pose2, Vec2};

/// Smallest range ever stored (m); contact reads as this instead of zero.
pub const MIN_RANGE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub plan_id: String,
    pub scenario: usize,
    /// 0-based pose index of the anchor.
    pub step: usize,
    pub scans: Vec<Vec<f64>>,
    pub past_actions: Vec<Action>,
    pub future_actions: Vec<Action>,
    pub goal: Vec2,
    /// The anchor sits on the goal and `goal` is zero.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub at_goal: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub m_l: usize,
    pub m_a: usize,
    pub lidar: LidarConfig,
    /// Cast historical scans along their own headings instead of the anchor's.
    pub sensor_native_frames: bool,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self { m_l: 5, m_a: 5, lidar: LidarConfig::default(), sensor_native_frames: false }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m_l == 0 || self.m_a == 0 {
            return Err(Error::Config("render: window sizes must be at least 1".into()));
        }
        self.lidar.validate()?;
        Ok(())
    }
}

fn finish_ranges<R: Rng + ?Sized>(mut ranges: Vec<f64>, lidar: &LidarConfig, rng: &mut R) -> Vec<f64> {
    let noise = (lidar.range_noise_sigma > 0.0)
        .then(|| Normal::new(0.0, lidar.range_noise_sigma).expect("validated sigma"));
    for r in &mut ranges {
        if let Some(n) = &noise {
            *r += n.sample(rng);
        }
        *r = r.clamp(MIN_RANGE, lidar.max_range);
    }
    ranges
}

/// Ranges seen from `robot` at 1-based timestep `t`, with optional Gaussian noise.
pub fn render_scan<R: Rng + ?Sized>(
    robot: &Pose2,
    scenario: &Scenario,
    t: usize,
    lidar: &LidarConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let scan = raycast(robot, &scenario.obstacles_at(t), lidar)?;
    Ok(finish_ranges(scan.ranges, lidar, rng))
}

/// One record per anchor `i` in `0..=H - m_a`. Actions are padded with a
/// terminal zero action and with zeros before the start; scans before the
/// start repeat the first pose.
pub fn build_records<R: Rng + ?Sized>(
    plan_id: &str,
    scenario_index: usize,
    plan: &Plan,
    scenario: &Scenario,
    config: &RenderConfig,
    rng: &mut R,
) -> Result<Vec<TrainingRecord>> {
    config.validate()?;
    let h = plan.horizon();
    let (m_l, m_a) = (config.m_l, config.m_a);
    if h < m_l + m_a {
        return Ok(Vec::new());
    }
    let poses = plan.poses();
    let mut actions = plan.actions().to_vec();
    actions.push(Action::ZERO);
    let goal = plan.goal().position();

    let mut records = Vec::with_capacity(h - m_a + 1);
    for i in 0..=h - m_a {
        let anchor = poses[i];
        let mut scans = Vec::with_capacity(m_l);
        for k in 0..m_l {
            let j = (i + k + 1).saturating_sub(m_l);
            let local = anchor.relative(&poses[j]);
            let sensor = if config.sensor_native_frames { local } else { Pose2::from_position(local.position(), 0.0) };
            let obstacles: Vec<Obstacle> = scenario
                .obstacles_at(j + 1)
                .into_iter()
                .map(|o| Obstacle { center: anchor.to_local(o.center), radius: o.radius })
                .collect();
            let scan = raycast(&sensor, &obstacles, &config.lidar)?;
            scans.push(finish_ranges(scan.ranges, &config.lidar, rng));
        }
        let past_actions = (0..m_l)
            .map(|k| match (i + k).checked_sub(m_l) {
                Some(j) => actions[j],
                None => Action::ZERO,
            })
            .collect();
        let future_actions = actions[i..i + m_a].to_vec();
        let to_goal = anchor.to_local(goal);
        let (goal_unit, at_goal) = match to_goal.normalized() {
            Some(u) => (u, false),
            None => (Vec2::ZERO, true),
        };
        records.push(TrainingRecord {
            plan_id: plan_id.to_string(),
            scenario: scenario_index,
            step: i,
            scans,
            past_actions,
            future_actions,
            goal: goal_unit,
            at_goal,
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::straight_line_plan;
    use crate::generator::ObstacleTrajectory;
    use crate::seed::rng_from_seed;

    fn empty() -> Scenario {
        Scenario { plan_id: "p".into(), trajectories: vec![], augmented: vec![] }
    }

    fn still(anchor: Vec2, velocity: Vec2) -> ObstacleTrajectory {
        ObstacleTrajectory { anchor, velocity, t_crit: 1, radius: 0.5, dt: 0.1 }
    }

    #[test]
    fn empty_scenario_reads_max_range() {
        let lidar = LidarConfig::default();
        let r = render_scan(&Pose2::ORIGIN, &empty(), 1, &lidar, &mut rng_from_seed(0)).unwrap();
        assert!(r.iter().all(|&x| x == lidar.max_range));
    }

    #[test]
    fn obstacle_dead_ahead() {
        let lidar = LidarConfig { beams: 4, ..Default::default() };
        let s = Scenario { trajectories: vec![still(Vec2::new(3.0, 0.0), Vec2::ZERO)], ..empty() };
        let r = render_scan(&Pose2::ORIGIN, &s, 1, &lidar, &mut rng_from_seed(0)).unwrap();
        // Offsets are -π, -π/2, 0, π/2.
        assert!((r[2] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn record_windows() {
        let plan = straight_line_plan(Vec2::new(1.0, 0.0), 10, 0.1).unwrap();
        let cfg = RenderConfig { lidar: LidarConfig { beams: 8, ..Default::default() }, ..Default::default() };
        let recs = build_records("p", 0, &plan, &empty(), &cfg, &mut rng_from_seed(0)).unwrap();
        assert_eq!(recs.len(), 10 - 5 + 1);
        assert!(recs[0].past_actions.iter().all(|a| *a == Action::ZERO));
        assert_eq!(recs[1].past_actions[4], plan.actions()[0]);
        assert!(recs[1].past_actions[..4].iter().all(|a| *a == Action::ZERO));
        assert_eq!(*recs.last().unwrap().future_actions.last().unwrap(), Action::ZERO);
        let short = straight_line_plan(Vec2::new(1.0, 0.0), 9, 0.1).unwrap();
        assert!(build_records("p", 0, &short, &empty(), &cfg, &mut rng_from_seed(0)).unwrap().is_empty());
    }

    #[test]
    fn goal_points_along_final_segment() {
        let q: Vec<Vec2> = (0..12).map(|i| Vec2::new(0.2 * i as f64, 0.02 * (i * i) as f64)).collect();
        let plan = Plan::from_positions(&q, 0.1).unwrap();
        let cfg = RenderConfig { m_a: 1, lidar: LidarConfig { beams: 4, ..Default::default() }, ..Default::default() };
        let recs = build_records("p", 0, &plan, &empty(), &cfg, &mut rng_from_seed(0)).unwrap();
        let penult = recs.iter().find(|r| r.step == 10).unwrap();
        let seg = plan.poses()[10].to_local(q[11]) - plan.poses()[10].to_local(q[10]);
        assert!(penult.goal.dot(seg.normalized().unwrap()) >= 0.999);
        assert!(recs.last().unwrap().at_goal);
    }

    #[test]
    fn moving_obstacle_matches_shifted_raycast() {
        let lidar = LidarConfig { beams: 90, ..Default::default() };
        let traj = still(Vec2::new(3.0, 0.4), Vec2::new(-1.0, 0.5));
        let s = Scenario { trajectories: vec![traj], ..empty() };
        let mut rng = rng_from_seed(0);
        for t in [1, 2, 7] {
            let r = render_scan(&Pose2::ORIGIN, &s, t, &lidar, &mut rng).unwrap();
            let oracle = raycast(&Pose2::ORIGIN, &[traj.obstacle_at(t)], &lidar).unwrap();
            assert_eq!(r, oracle.ranges);
        }
    }
}
