//! 2D kinematic primitives shared by every stage of the pipeline: points,
//! poses, velocity actions, plans, circular obstacles, clearance checks and
//! ray casting.
//!
//! Plans live in the robot's start frame. Timesteps are 1-based where they
//! appear in public data (critical times, trajectory anchors) and 0-based
//! where they index slices.

use std::f64::consts::{PI, TAU};
use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::GeometryError;

/// Default planning step: a 233-pose window covers about 5 s, i.e. 232 intervals.
pub const DEFAULT_DT: f64 = 5.0 / 232.0;

/// Default planning window length.
pub const DEFAULT_HORIZON: usize = 233;

/// Collision footprint of the robot when nothing else is configured.
pub const DEFAULT_ROBOT_RADIUS: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    #[inline]
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    #[inline]
    pub fn from_polar(length: f64, angle: f64) -> Self {
        Self::new(length * angle.cos(), length * angle.sin())
    }

    #[inline]
    pub fn dot(self, other: Vec2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    #[inline]
    pub fn cross(self, other: Vec2) -> f64 {
        self.x * other.y - self.y * other.x
    }

    #[inline]
    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    #[inline]
    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    #[inline]
    pub fn distance(self, other: Vec2) -> f64 {
        (self - other).norm()
    }

    /// Angle of the vector, `atan2(y, x)`.
    #[inline]
    pub fn angle(self) -> f64 {
        self.y.atan2(self.x)
    }

    /// Counter-clockwise rotation by `angle`.
    #[inline]
    pub fn rotate(self, angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    /// Unit vector, or `None` for (near-)zero vectors.
    pub fn normalized(self) -> Option<Self> {
        let n = self.norm();
        (n > 1e-12).then(|| self * (1.0 / n))
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl From<[f64; 2]> for Vec2 {
    fn from(a: [f64; 2]) -> Self {
        Self::new(a[0], a[1])
    }
}

impl From<Vec2> for [f64; 2] {
    fn from(v: Vec2) -> Self {
        [v.x, v.y]
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    #[inline]
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl AddAssign for Vec2 {
    #[inline]
    fn add_assign(&mut self, o: Vec2) {
        self.x += o.x;
        self.y += o.y;
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    #[inline]
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    #[inline]
    fn mul(self, k: f64) -> Vec2 {
        Vec2::new(self.x * k, self.y * k)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    #[inline]
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

/// Wraps a finite angle into `[-π, π)`. Values already in range are returned
/// untouched so the map is idempotent bit-for-bit.
pub fn wrap_angle(a: f64) -> f64 {
    if (-PI..PI).contains(&a) {
        return a;
    }
    let mut r = (a + PI).rem_euclid(TAU) - PI;
    if r >= PI {
        r -= TAU;
    }
    if r < -PI {
        r = -PI;
    }
    r
}

/// Checked variant of [`wrap_angle`] that rejects NaN and infinities.
pub fn normalize_angle(a: f64) -> Result<f64, GeometryError> {
    if !a.is_finite() {
        return Err(GeometryError::NonFinite("angle"));
    }
    Ok(wrap_angle(a))
}

/// SE(2) pose. The heading is kept in `[-π, π)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "[f64; 3]", into = "[f64; 3]")]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    heading: f64,
}

impl Pose2 {
    pub const ORIGIN: Pose2 = Pose2 { x: 0.0, y: 0.0, heading: 0.0 };

    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Self { x, y, heading: wrap_angle(heading) }
    }

    pub fn from_position(p: Vec2, heading: f64) -> Self {
        Self::new(p.x, p.y, heading)
    }

    #[inline]
    pub fn heading(&self) -> f64 {
        self.heading
    }

    #[inline]
    pub fn position(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }

    /// Expresses a world point in this pose's frame.
    pub fn to_local(&self, p: Vec2) -> Vec2 {
        (p - self.position()).rotate(-self.heading)
    }

    /// Maps a point given in this pose's frame into the world frame.
    pub fn to_world(&self, p: Vec2) -> Vec2 {
        p.rotate(self.heading) + self.position()
    }

    /// Composition `self ∘ other`: `other` expressed in this pose's frame, returned in world.
    pub fn compose(&self, other: &Pose2) -> Pose2 {
        Pose2::from_position(self.to_world(other.position()), self.heading + other.heading)
    }

    /// `other` expressed relative to this pose.
    pub fn relative(&self, other: &Pose2) -> Pose2 {
        Pose2::from_position(self.to_local(other.position()), other.heading - self.heading)
    }
}

impl TryFrom<[f64; 3]> for Pose2 {
    type Error = GeometryError;
    fn try_from(a: [f64; 3]) -> Result<Self, Self::Error> {
        if a.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite("pose"));
        }
        Ok(Pose2::new(a[0], a[1], a[2]))
    }
}

impl From<Pose2> for [f64; 3] {
    fn from(p: Pose2) -> Self {
        [p.x, p.y, p.heading]
    }
}

/// Linear and angular velocity command.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Action {
    pub v: f64,
    pub omega: f64,
}

impl Action {
    pub const ZERO: Action = Action { v: 0.0, omega: 0.0 };

    pub const fn new(v: f64, omega: f64) -> Self {
        Self { v, omega }
    }

    pub fn is_finite(&self) -> bool {
        self.v.is_finite() && self.omega.is_finite()
    }

    /// Rotate-then-translate unicycle step. This is the exact inverse of the
    /// finite-difference recovery in [`Plan::from_positions`].
    pub fn integrate(&self, pose: &Pose2, dt: f64) -> Pose2 {
        let heading = pose.heading + self.omega * dt;
        let p = pose.position() + Vec2::from_polar(self.v * dt, heading);
        Pose2::from_position(p, heading)
    }
}

impl From<[f64; 2]> for Action {
    fn from(a: [f64; 2]) -> Self {
        Self::new(a[0], a[1])
    }
}

impl From<Action> for [f64; 2] {
    fn from(a: Action) -> Self {
        [a.v, a.omega]
    }
}

/// A windowed motion plan in the robot's start frame.
///
/// `poses[0]` is the origin with zero heading, there is one action per
/// interval and the final pose doubles as the goal.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    poses: Vec<Pose2>,
    actions: Vec<Action>,
    dt: f64,
}

impl Plan {
    pub fn new(poses: Vec<Pose2>, actions: Vec<Action>, dt: f64) -> Result<Self, GeometryError> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(GeometryError::InvalidPlan(format!("dt must be positive, got {dt}")));
        }
        if poses.is_empty() {
            return Err(GeometryError::InvalidPlan("plan has no poses".into()));
        }
        if actions.len() + 1 != poses.len() {
            return Err(GeometryError::InvalidPlan(format!(
                "{} poses need {} actions, got {}",
                poses.len(),
                poses.len() - 1,
                actions.len()
            )));
        }
        if poses[0] != Pose2::ORIGIN {
            return Err(GeometryError::InvalidPlan("first pose must be the origin".into()));
        }
        if poses.iter().any(|p| !(p.x.is_finite() && p.y.is_finite())) {
            return Err(GeometryError::NonFinite("pose"));
        }
        if actions.iter().any(|a| !a.is_finite()) {
            return Err(GeometryError::NonFinite("action"));
        }
        Ok(Self { poses, actions, dt })
    }

    /// Builds a plan from waypoint positions, recovering headings and actions
    /// by finite differences. `positions[0]` must be the origin. Heading of
    /// pose `t ≥ 1` is the direction of the step arriving at it; zero-length
    /// steps keep the previous heading.
    pub fn from_positions(positions: &[Vec2], dt: f64) -> Result<Self, GeometryError> {
        if positions.is_empty() {
            return Err(GeometryError::InvalidPlan("plan has no poses".into()));
        }
        if positions[0] != Vec2::ZERO {
            return Err(GeometryError::InvalidPlan("first position must be the origin".into()));
        }
        let mut poses = Vec::with_capacity(positions.len());
        let mut actions = Vec::with_capacity(positions.len().saturating_sub(1));
        poses.push(Pose2::ORIGIN);
        let mut heading = 0.0;
        for w in positions.windows(2) {
            let step = w[1] - w[0];
            let len = step.norm();
            let next = if len > 1e-12 { step.angle() } else { heading };
            let turn = wrap_angle(next - heading);
            actions.push(Action::new(len / dt, turn / dt));
            heading = next;
            poses.push(Pose2::from_position(w[1], heading));
        }
        Self::new(poses, actions, dt)
    }

    pub fn poses(&self) -> &[Pose2] {
        &self.poses
    }

    pub fn actions(&self) -> &[Action] {
        &self.actions
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Number of poses `H`.
    pub fn horizon(&self) -> usize {
        self.poses.len()
    }

    pub fn goal(&self) -> Pose2 {
        *self.poses.last().expect("plans are never empty")
    }

    pub fn positions(&self) -> Vec<Vec2> {
        self.poses.iter().map(Pose2::position).collect()
    }

    /// Axis-aligned bounding box of the waypoints as `(min, max)`.
    pub fn bounds(&self) -> (Vec2, Vec2) {
        let mut lo = Vec2::new(f64::INFINITY, f64::INFINITY);
        let mut hi = Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in &self.poses {
            lo.x = lo.x.min(p.x);
            lo.y = lo.y.min(p.y);
            hi.x = hi.x.max(p.x);
            hi.y = hi.y.max(p.y);
        }
        (lo, hi)
    }
}

/// Mean squared Euclidean distance between corresponding waypoints.
pub fn position_mse(a: &[Vec2], b: &[Vec2]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    if a.is_empty() {
        return 0.0;
    }
    let sum: f64 = a.iter().zip(b).map(|(p, q)| (*p - *q).norm_sq()).sum();
    sum / a.len() as f64
}

/// Circular obstacle footprint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub center: Vec2,
    pub radius: f64,
}

impl Obstacle {
    pub fn new(center: Vec2, radius: f64) -> Result<Self, GeometryError> {
        if !(radius.is_finite() && radius > 0.0) {
            return Err(GeometryError::InvalidRadius(radius));
        }
        if !center.is_finite() {
            return Err(GeometryError::NonFinite("obstacle center"));
        }
        Ok(Self { center, radius })
    }

    pub fn contains(&self, p: Vec2) -> bool {
        (p - self.center).norm_sq() < self.radius * self.radius
    }
}

/// Minimum signed clearance between the robot disc following `poses` and a
/// moving disc at `traj[t]`. Negative means contact.
pub fn min_clearance(
    poses: &[Pose2],
    traj: &[Vec2],
    radius: f64,
    robot_radius: f64,
) -> Result<f64, GeometryError> {
    if poses.len() != traj.len() {
        return Err(GeometryError::HorizonMismatch { expected: poses.len(), got: traj.len() });
    }
    Ok(poses
        .iter()
        .zip(traj)
        .map(|(p, q)| p.position().distance(*q) - radius - robot_radius)
        .fold(f64::INFINITY, f64::min))
}

/// Range sensor model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LidarConfig {
    pub beams: usize,
    /// Field of view in radians, centred on the sensor heading.
    pub fov: f64,
    pub max_range: f64,
    pub range_noise_sigma: f64,
}

impl Default for LidarConfig {
    fn default() -> Self {
        Self { beams: 360, fov: TAU, max_range: 10.0, range_noise_sigma: 0.0 }
    }
}

impl LidarConfig {
    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.beams == 0 {
            return Err(GeometryError::InvalidLidar("beam count must be at least 1".into()));
        }
        if !(self.max_range.is_finite() && self.max_range > 0.0) {
            return Err(GeometryError::InvalidLidar("max range must be positive".into()));
        }
        if !(self.fov.is_finite() && self.fov >= 0.0) {
            return Err(GeometryError::InvalidLidar("field of view must be non-negative".into()));
        }
        if !(self.range_noise_sigma.is_finite() && self.range_noise_sigma >= 0.0) {
            return Err(GeometryError::InvalidLidar("noise sigma must be non-negative".into()));
        }
        Ok(())
    }

    /// Beam offsets relative to the sensor heading, increasing. A full circle
    /// is sampled without duplicating the seam; partial fields include both edges.
    pub fn beam_offsets(&self) -> Vec<f64> {
        let n = self.beams;
        if n == 1 {
            return vec![0.0];
        }
        let full = self.fov >= TAU - 1e-12;
        let step = if full { self.fov / n as f64 } else { self.fov / (n - 1) as f64 };
        (0..n).map(|k| -0.5 * self.fov + k as f64 * step).collect()
    }
}

/// Result of a ray-cast sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct Scan {
    pub ranges: Vec<f64>,
    /// The sensor origin lies strictly inside at least one obstacle.
    pub origin_inside: bool,
}

/// Distance along a unit ray to the first intersection with a circle, if any.
/// Tangent rays count as hits; an origin inside the circle hits at 0.
pub fn ray_circle(origin: Vec2, dir: Vec2, center: Vec2, radius: f64) -> Option<f64> {
    let f = origin - center;
    let c = f.norm_sq() - radius * radius;
    if c <= 0.0 {
        return Some(0.0);
    }
    let b = f.dot(dir);
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let t = -b - disc.sqrt();
    (t >= 0.0).then_some(t)
}

/// Casts every configured beam from `origin` and returns the nearest hit per
/// beam, clamped to the maximum range.
pub fn raycast(
    origin: &Pose2,
    obstacles: &[Obstacle],
    config: &LidarConfig,
) -> Result<Scan, GeometryError> {
    config.validate()?;
    let o = origin.position();
    let origin_inside = obstacles.iter().any(|ob| ob.contains(o));
    let ranges = config
        .beam_offsets()
        .into_iter()
        .map(|off| {
            let dir = Vec2::from_polar(1.0, origin.heading + off);
            obstacles
                .iter()
                .filter_map(|ob| ray_circle(o, dir, ob.center, ob.radius))
                .fold(config.max_range, f64::min)
        })
        .collect();
    Ok(Scan { ranges, origin_inside })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_angle_examples() {
        assert_eq!(normalize_angle(0.0).unwrap(), 0.0);
        assert!((normalize_angle(3.0 * PI).unwrap() + PI).abs() < 1e-12);
        assert!((normalize_angle(-3.5 * PI).unwrap() - PI / 2.0).abs() < 1e-12);
        assert_eq!(normalize_angle(PI).unwrap(), -PI);
        assert!(normalize_angle(f64::NAN).is_err());
        assert!(normalize_angle(f64::INFINITY).is_err());
    }

    #[test]
    fn min_clearance_examples() {
        let poses = vec![Pose2::ORIGIN; 4];
        let far = vec![Vec2::new(1.0, 0.0); 4];
        assert!((min_clearance(&poses, &far, 0.5, 0.2).unwrap() - 0.3).abs() < 1e-12);
        let near = vec![Vec2::new(0.6, 0.0); 4];
        assert!((min_clearance(&poses, &near, 0.5, 0.2).unwrap() + 0.1).abs() < 1e-12);
        assert!(matches!(
            min_clearance(&poses, &near[..3], 0.5, 0.2),
            Err(GeometryError::HorizonMismatch { .. })
        ));
    }

    #[test]
    fn raycast_examples() {
        let cfg = LidarConfig { beams: 8, ..Default::default() };
        let scan = raycast(&Pose2::ORIGIN, &[], &cfg).unwrap();
        assert!(scan.ranges.iter().all(|&r| r == cfg.max_range));

        let ahead = LidarConfig { beams: 1, fov: 0.0, ..Default::default() };
        let ob = Obstacle::new(Vec2::new(2.0, 0.0), 0.5).unwrap();
        let scan = raycast(&Pose2::ORIGIN, &[ob], &ahead).unwrap();
        assert!((scan.ranges[0] - 1.5).abs() < 1e-12);
        assert!(!scan.origin_inside);
    }

    #[test]
    fn raycast_inside_obstacle_reads_zero() {
        let ob = Obstacle::new(Vec2::new(0.1, 0.0), 0.5).unwrap();
        let scan = raycast(&Pose2::ORIGIN, &[ob], &LidarConfig::default()).unwrap();
        assert!(scan.origin_inside);
        assert!(scan.ranges.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn tangent_ray_counts_as_hit() {
        let hit = ray_circle(Vec2::ZERO, Vec2::new(1.0, 0.0), Vec2::new(2.0, 0.5), 0.5);
        assert_eq!(hit, Some(2.0));
        assert_eq!(ray_circle(Vec2::ZERO, Vec2::new(-1.0, 0.0), Vec2::new(2.0, 0.0), 0.5), None);
    }

    #[test]
    fn lidar_validation() {
        assert!(LidarConfig { beams: 0, ..Default::default() }.validate().is_err());
        assert!(LidarConfig { max_range: 0.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn beam_offsets_cover_circle_without_seam() {
        let offs = LidarConfig::default().beam_offsets();
        assert_eq!(offs.len(), 360);
        assert_eq!(offs[0], -PI);
        assert!(offs[180].abs() < 1e-12);
        assert!(offs.windows(2).all(|w| w[1] > w[0]));
        let partial = LidarConfig { beams: 3, fov: PI, ..Default::default() }.beam_offsets();
        assert_eq!(partial, vec![-PI / 2.0, 0.0, PI / 2.0]);
    }

    #[test]
    fn plan_validation() {
        let dt = 0.1;
        assert!(Plan::new(vec![Pose2::ORIGIN], vec![], dt).is_ok());
        assert!(Plan::new(vec![Pose2::ORIGIN], vec![], 0.0).is_err());
        assert!(Plan::new(vec![Pose2::new(1.0, 0.0, 0.0)], vec![], dt).is_err());
        assert!(Plan::new(vec![Pose2::ORIGIN; 2], vec![], dt).is_err());
    }

    #[test]
    fn from_positions_round_trips_through_integration() {
        let pts = [
            Vec2::ZERO,
            Vec2::new(0.1, 0.0),
            Vec2::new(0.2, 0.05),
            Vec2::new(0.2, 0.05),
            Vec2::new(0.25, 0.15),
        ];
        let plan = Plan::from_positions(&pts, 0.1).unwrap();
        let mut pose = Pose2::ORIGIN;
        for (a, expected) in plan.actions().iter().zip(&plan.poses()[1..]) {
            pose = a.integrate(&pose, plan.dt());
            assert!(pose.position().distance(expected.position()) < 1e-12);
            assert!(wrap_angle(pose.heading() - expected.heading()).abs() < 1e-12);
        }
    }

    #[test]
    fn frames_invert() {
        let pose = Pose2::new(1.0, -2.0, 0.7);
        let p = Vec2::new(0.3, 4.0);
        assert!(pose.to_world(pose.to_local(p)).distance(p) < 1e-12);
        let q = Pose2::new(-0.4, 0.2, 2.9);
        let back = pose.compose(&pose.relative(&q));
        assert!(back.position().distance(q.position()) < 1e-12);
        assert!(wrap_angle(back.heading() - q.heading()).abs() < 1e-12);
    }
}
