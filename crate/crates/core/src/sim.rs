//! Closed-loop evaluation in procedurally generated dynamic worlds: disc
//! obstacles bouncing inside a rectangular arena, a unicycle robot driven by a
//! pluggable planner, and a predictive safety layer that halts and reverses.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver};
use std::time::{Duration, Instant};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{raycast, Action, LidarConfig, Obstacle, Pose2, Vec2, DEFAULT_ROBOT_RADIUS};
use crate::seed::{child_seed, rng_from_seed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Easy,
    Medium,
    Hard,
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tier::Easy => "easy",
            Tier::Medium => "medium",
            Tier::Hard => "hard",
        })
    }
}

/// Axis-aligned rectangle (m).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Arena {
    pub min: Vec2,
    pub max: Vec2,
}

impl Arena {
    pub fn contains(&self, p: Vec2) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y
    }

    pub fn size(&self) -> Vec2 {
        self.max - self.min
    }
}

/// Heading oscillation superimposed on straight-line motion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wobble {
    /// Peak heading deviation (rad).
    pub amplitude: f64,
    /// Seconds.
    pub period: f64,
}

/// Initial state and velocity law of one obstacle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObstacleSpec {
    pub position: Vec2,
    pub speed: f64,
    pub heading: f64,
    pub radius: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wobble: Option<Wobble>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub id: String,
    pub arena: Arena,
    pub start: Pose2,
    pub goal: Vec2,
    pub obstacles: Vec<ObstacleSpec>,
    pub difficulty: Tier,
    pub seed: u64,
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        if !self.arena.contains(self.start.position()) || !self.arena.contains(self.goal) {
            return Err(Error::InvalidInput(format!("world {}: start and goal must lie in the arena", self.id)));
        }
        for o in &self.obstacles {
            Obstacle::new(o.position, o.radius)?;
            if !(o.speed.is_finite() && o.speed >= 0.0 && o.heading.is_finite()) {
                return Err(Error::InvalidInput(format!("world {}: bad obstacle velocity", self.id)));
            }
            if let Some(w) = o.wobble {
                if !(w.amplitude.is_finite() && w.period.is_finite() && w.period > 0.0) {
                    return Err(Error::InvalidInput(format!("world {}: bad wobble", self.id)));
                }
            }
        }
        Ok(())
    }
}

/// One row of the world-generation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierBand {
    pub tier: Tier,
    pub worlds: usize,
    /// Inclusive obstacle count range.
    pub obstacles: (usize, usize),
    /// Speed range (m/s).
    pub speed: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub bands: Vec<TierBand>,
    pub arena: Arena,
    pub obstacle_radius: f64,
    /// Obstacle bodies start outside discs of this radius around start and goal.
    pub keep_out: f64,
    /// Distance of start and goal from their arena edges.
    pub edge_offset: f64,
    pub wobble: Option<Wobble>,
    pub max_placement_attempts: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        let band = |tier, worlds, obstacles, speed| TierBand { tier, worlds, obstacles, speed };
        Self {
            bands: vec![
                band(Tier::Easy, 20, (5, 10), (0.5, 1.0)),
                band(Tier::Medium, 10, (5, 10), (0.5, 1.0)),
                band(Tier::Medium, 10, (10, 20), (0.5, 1.0)),
                band(Tier::Hard, 20, (10, 20), (1.0, 2.0)),
            ],
            arena: Arena { min: Vec2::ZERO, max: Vec2::new(10.0, 10.0) },
            obstacle_radius: 0.3,
            keep_out: 1.0,
            edge_offset: 0.5,
            wobble: None,
            max_placement_attempts: 10_000,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("worlds: {m}")));
        for b in &self.bands {
            if b.obstacles.0 > b.obstacles.1 {
                return bad("obstacle count range is reversed");
            }
            if !(b.speed.0.is_finite() && b.speed.0 >= 0.0 && b.speed.0 <= b.speed.1 && b.speed.1.is_finite()) {
                return bad("speed range must be finite, non-negative and ordered");
            }
        }
        if !(self.obstacle_radius.is_finite() && self.obstacle_radius > 0.0) {
            return bad("obstacle radius must be positive");
        }
        let size = self.arena.size();
        if !(size.x.is_finite() && size.y.is_finite() && size.x > 0.0 && size.y > 0.0) {
            return bad("arena must have positive extent");
        }
        if !(self.edge_offset >= 0.0 && 2.0 * self.edge_offset < size.y && self.keep_out >= 0.0) {
            return bad("edge offset and keep-out must fit the arena");
        }
        Ok(())
    }

    pub fn world_count(&self) -> usize {
        self.bands.iter().map(|b| b.worlds).sum()
    }
}

/// Start and goal sit on opposite (bottom and top) edges, centred.
fn start_goal(cfg: &WorldConfig) -> (Pose2, Vec2) {
    let a = cfg.arena;
    let cx = 0.5 * (a.min.x + a.max.x);
    let start = Pose2::new(cx, a.min.y + cfg.edge_offset, std::f64::consts::FRAC_PI_2);
    (start, Vec2::new(cx, a.max.y - cfg.edge_offset))
}

fn sample_world<R: Rng + ?Sized>(cfg: &WorldConfig, band: &TierBand, id: String, seed: u64, rng: &mut R) -> Result<WorldSpec> {
    let (start, goal) = start_goal(cfg);
    let r = cfg.obstacle_radius;
    let (lo, hi) = (cfg.arena.min + Vec2::new(r, r), cfg.arena.max - Vec2::new(r, r));
    if lo.x >= hi.x || lo.y >= hi.y {
        return Err(Error::ArenaTooSmall(format!("{r} m obstacles do not fit the arena")));
    }
    let n = rng.random_range(band.obstacles.0..=band.obstacles.1);
    let clear = cfg.keep_out + r;
    let mut obstacles = Vec::with_capacity(n);
    for _ in 0..n {
        let mut placed = None;
        for _ in 0..cfg.max_placement_attempts.max(1) {
            let p = Vec2::new(rng.random_range(lo.x..=hi.x), rng.random_range(lo.y..=hi.y));
            if p.distance(start.position()) > clear && p.distance(goal) > clear {
                placed = Some(p);
                break;
            }
        }
        let position = placed.ok_or_else(|| {
            Error::ArenaTooSmall(format!("no room for an obstacle outside the {} m keep-out discs", cfg.keep_out))
        })?;
        let speed = if band.speed.0 < band.speed.1 { rng.random_range(band.speed.0..=band.speed.1) } else { band.speed.0 };
        let heading = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        obstacles.push(ObstacleSpec { position, speed, heading, radius: r, wobble: cfg.wobble });
    }
    Ok(WorldSpec { id, arena: cfg.arena, start, goal, obstacles, difficulty: band.tier, seed })
}

/// Worlds for every band in order; world `i` draws from `child_seed(seed, "world", i)`.
pub fn generate_worlds(cfg: &WorldConfig, seed: u64) -> Result<Vec<WorldSpec>> {
    cfg.validate()?;
    let mut worlds = Vec::with_capacity(cfg.world_count());
    for band in &cfg.bands {
        for _ in 0..band.worlds {
            let i = worlds.len();
            let s = child_seed(seed, "world", i as u64);
            worlds.push(sample_world(cfg, band, format!("world_{i:03}"), s, &mut rng_from_seed(s))?);
        }
    }
    Ok(worlds)
}

/// Moving obstacle with specular reflection off the arena walls.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObstacleState {
    pub position: Vec2,
    pub speed: f64,
    /// Base heading; the wobble term is added on top.
    pub heading: f64,
    pub amplitude: f64,
    pub period: f64,
    pub radius: f64,
}

impl ObstacleState {
    pub fn new(spec: &ObstacleSpec) -> Self {
        let (amplitude, period) = spec.wobble.map_or((0.0, 1.0), |w| (w.amplitude, w.period));
        Self { position: spec.position, speed: spec.speed, heading: spec.heading, amplitude, period, radius: spec.radius }
    }

    pub fn velocity(&self, time: f64) -> Vec2 {
        let h = self.heading + self.amplitude * (std::f64::consts::TAU * time / self.period).sin();
        Vec2::from_polar(self.speed, h)
    }

    /// Advances from `time` by `dt`. Reflection mirrors the velocity law, so
    /// speed is unchanged.
    pub fn step(&mut self, arena: &Arena, time: f64, dt: f64) {
        let mut p = self.position + self.velocity(time) * dt;
        let (lo, hi) = (arena.min + Vec2::new(self.radius, self.radius), arena.max - Vec2::new(self.radius, self.radius));
        let mut flip_x = false;
        let mut flip_y = false;
        // A single step never crosses the arena twice, but guard regardless.
        for _ in 0..4 {
            if p.x < lo.x {
                p.x = 2.0 * lo.x - p.x;
                flip_x = !flip_x;
            } else if p.x > hi.x {
                p.x = 2.0 * hi.x - p.x;
                flip_x = !flip_x;
            } else if p.y < lo.y {
                p.y = 2.0 * lo.y - p.y;
                flip_y = !flip_y;
            } else if p.y > hi.y {
                p.y = 2.0 * hi.y - p.y;
                flip_y = !flip_y;
            } else {
                break;
            }
        }
        if flip_x {
            self.heading = std::f64::consts::PI - self.heading;
            self.amplitude = -self.amplitude;
        }
        if flip_y {
            self.heading = -self.heading;
            self.amplitude = -self.amplitude;
        }
        self.position = p;
    }

    pub fn obstacle(&self) -> Obstacle {
        Obstacle { center: self.position, radius: self.radius }
    }
}

/// What a planner sees each step, all in the robot frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerInput {
    /// Oldest first; the last entry is the current scan.
    pub scans: Vec<Vec<f64>>,
    pub past_actions: Vec<Action>,
    pub goal: Vec2,
}

/// Produces `m_a` actions per query; the harness executes only the first.
pub trait Planner {
    fn plan(&mut self, input: &PlannerInput, m_a: usize) -> Result<Vec<Action>>;
}

/// Drives with a fixed command.
#[derive(Debug, Clone, Copy)]
pub struct ConstantPlanner(pub Action);

impl Planner for ConstantPlanner {
    fn plan(&mut self, _: &PlannerInput, m_a: usize) -> Result<Vec<Action>> {
        Ok(vec![self.0; m_a])
    }
}

/// Plays back a recorded action sequence, then stops.
#[derive(Debug, Clone)]
pub struct ReplayPlanner {
    actions: Vec<Action>,
    cursor: usize,
}

impl ReplayPlanner {
    pub fn new(actions: Vec<Action>) -> Self {
        Self { actions, cursor: 0 }
    }
}

impl Planner for ReplayPlanner {
    fn plan(&mut self, _: &PlannerInput, m_a: usize) -> Result<Vec<Action>> {
        let out = (0..m_a).map(|k| self.actions.get(self.cursor + k).copied().unwrap_or(Action::ZERO)).collect();
        self.cursor += 1;
        Ok(out)
    }
}

/// Reactive baseline: steer toward the free direction closest to the goal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GapFollower {
    pub max_speed: f64,
    pub max_turn_rate: f64,
    /// Corridor half-width checked along each candidate heading.
    pub half_width: f64,
    /// Free distance wanted before a heading counts as open.
    pub clear_distance: f64,
    pub turn_gain: f64,
    /// Candidate headings are tested every `stride` beams.
    pub stride: usize,
    #[serde(skip)]
    offsets: Vec<f64>,
}

impl Default for GapFollower {
    fn default() -> Self {
        Self {
            max_speed: 1.0,
            max_turn_rate: 2.0,
            half_width: 0.35,
            clear_distance: 1.5,
            turn_gain: 2.0,
            stride: 4,
            offsets: Vec::new(),
        }
    }
}

impl GapFollower {
    fn free_distance(&self, ranges: &[f64], offsets: &[f64], theta: f64, cap: f64) -> f64 {
        let mut free = cap;
        for (&r, &o) in ranges.iter().zip(offsets) {
            if r >= free {
                continue;
            }
            let d = o - theta;
            let along = r * d.cos();
            if along > 0.0 && (r * d.sin()).abs() < self.half_width {
                free = free.min(along);
            }
        }
        free
    }
}

impl Planner for GapFollower {
    fn plan(&mut self, input: &PlannerInput, m_a: usize) -> Result<Vec<Action>> {
        let scan = input.scans.last().ok_or_else(|| Error::Planner("no scan".into()))?;
        if self.offsets.len() != scan.len() {
            self.offsets = LidarConfig { beams: scan.len(), ..Default::default() }.beam_offsets();
        }
        let offsets = std::mem::take(&mut self.offsets);
        let target = input.goal.angle();
        let cap = self.clear_distance;
        let mut best: Option<(f64, f64)> = None;
        let mut widest = (f64::NEG_INFINITY, 0.0);
        for &theta in offsets.iter().step_by(self.stride.max(1)) {
            let free = self.free_distance(scan, &offsets, theta, cap);
            if free > widest.0 {
                widest = (free, theta);
            }
            let miss = crate::geometry::wrap_angle(theta - target).abs();
            if free >= cap && best.is_none_or(|(m, _)| miss < m) {
                best = Some((miss, theta));
            }
        }
        let goal_free = self.free_distance(scan, &offsets, target, cap);
        self.offsets = offsets;
        let (heading, free) = if goal_free >= cap {
            (target, goal_free)
        } else {
            best.map_or((widest.1, widest.0), |(_, t)| (t, cap))
        };
        let omega = (self.turn_gain * heading).clamp(-self.max_turn_rate, self.max_turn_rate);
        let v = self.max_speed * (free / cap).clamp(0.0, 1.0) * heading.cos().max(0.0);
        Ok(vec![Action::new(v, omega); m_a])
    }
}

/// Out-of-process planner speaking one JSON line per request and response.
pub struct ExternalPlanner {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
    deadline: Duration,
}

impl ExternalPlanner {
    pub fn spawn(command: &str, args: &[String], deadline: Duration) -> Result<Self> {
        let mut child = Command::new(command).args(args).stdin(Stdio::piped()).stdout(Stdio::piped()).spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, lines) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(Self { child, stdin, lines, deadline })
    }
}

impl Planner for ExternalPlanner {
    fn plan(&mut self, input: &PlannerInput, m_a: usize) -> Result<Vec<Action>> {
        let mut line = serde_json::to_string(input)?;
        line.push('\n');
        self.stdin.write_all(line.as_bytes())?;
        self.stdin.flush()?;
        let reply = match self.lines.recv_timeout(self.deadline) {
            Ok(r) => r?,
            Err(mpsc::RecvTimeoutError::Timeout) => return Err(Error::Planner("deadline exceeded".into())),
            Err(mpsc::RecvTimeoutError::Disconnected) => return Err(Error::Planner("planner process exited".into())),
        };
        let actions: Vec<Action> = serde_json::from_str(&reply)?;
        if actions.len() != m_a {
            return Err(Error::Planner(format!("expected {m_a} actions, got {}", actions.len())));
        }
        Ok(actions)
    }
}

impl Drop for ExternalPlanner {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SafetyConfig {
    pub enabled: bool,
    /// Rollout window (s).
    pub lookahead: f64,
    /// Predicted clearance below this triggers the override (m).
    pub margin: f64,
    pub reverse_speed: f64,
    /// When halting or reversing is itself predicted unsafe, pick the best
    /// command from a small grid instead.
    pub evasive: bool,
    pub evasive_speeds: Vec<f64>,
    pub evasive_turn_rates: Vec<f64>,
}

impl Default for SafetyConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            lookahead: 1.0,
            margin: 0.1,
            reverse_speed: 0.3,
            evasive: true,
            evasive_speeds: vec![-1.0, -0.5, 0.0, 0.5, 1.0],
            evasive_turn_rates: vec![-2.0, -1.0, 0.0, 1.0, 2.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrialConfig {
    pub dt: f64,
    /// Simulated seconds before a trial counts as a timeout.
    pub timeout: f64,
    pub goal_tolerance: f64,
    pub robot_radius: f64,
    pub lidar: LidarConfig,
    pub m_l: usize,
    pub m_a: usize,
    pub lookahead_distance: f64,
    /// Wall-clock budget per planner query.
    pub planner_deadline_ms: u64,
    pub safety: SafetyConfig,
    pub trials_per_world: usize,
}

impl Default for TrialConfig {
    fn default() -> Self {
        Self {
            dt: 0.05,
            timeout: 120.0,
            goal_tolerance: 0.5,
            robot_radius: DEFAULT_ROBOT_RADIUS,
            lidar: LidarConfig { range_noise_sigma: 0.01, ..Default::default() },
            m_l: 5,
            m_a: 5,
            lookahead_distance: 2.25,
            planner_deadline_ms: 1000,
            safety: SafetyConfig::default(),
            trials_per_world: 2,
        }
    }
}

impl TrialConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("simulation: {m}")));
        if !(self.dt.is_finite() && self.dt > 0.0 && self.timeout.is_finite() && self.timeout > 0.0) {
            return bad("dt and timeout must be positive");
        }
        if !(self.goal_tolerance > 0.0 && self.robot_radius >= 0.0 && self.lookahead_distance > 0.0) {
            return bad("goal tolerance and lookahead must be positive");
        }
        if self.m_l == 0 || self.m_a == 0 || self.trials_per_world == 0 {
            return bad("window sizes and trial count must be at least 1");
        }
        let s = &self.safety;
        if !(s.lookahead >= 0.0 && s.margin.is_finite() && s.reverse_speed >= 0.0) {
            return bad("safety parameters must be non-negative");
        }
        self.lidar.validate()?;
        Ok(())
    }

    pub fn max_steps(&self) -> usize {
        (self.timeout / self.dt).round() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Success,
    Collision,
    Timeout,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Outcome::Success => "success",
            Outcome::Collision => "collision",
            Outcome::Timeout => "timeout",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub outcome: Outcome,
    /// Simulated seconds.
    pub elapsed: f64,
    pub min_clearance_seen: f64,
    pub path_length: f64,
    pub steps: usize,
    pub safety_overrides: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

/// Executed robot poses and commands, one per step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrialTrace {
    pub poses: Vec<Pose2>,
    pub actions: Vec<Action>,
}

/// Direction from `robot` to the path point `distance` ahead of its
/// projection, clamped to the path end. `None` when the robot sits on that point.
pub fn goal_lookahead(path: &[Vec2], robot: &Pose2, distance: f64) -> Option<Vec2> {
    let p = robot.position();
    let target = match path {
        [] => return None,
        [only] => *only,
        _ => {
            let mut best = (f64::INFINITY, 0usize, 0.0);
            for (i, w) in path.windows(2).enumerate() {
                let seg = w[1] - w[0];
                let len2 = seg.norm_sq();
                let u = if len2 > 0.0 { ((p - w[0]).dot(seg) / len2).clamp(0.0, 1.0) } else { 0.0 };
                let d = p.distance(w[0] + seg * u);
                if d < best.0 {
                    best = (d, i, u);
                }
            }
            let (_, mut i, u) = best;
            let mut remaining = distance + u * path[i].distance(path[i + 1]);
            loop {
                let len = path[i].distance(path[i + 1]);
                if remaining <= len {
                    let dir = (path[i + 1] - path[i]).normalized().unwrap_or(Vec2::ZERO);
                    break path[i] + dir * remaining;
                }
                remaining -= len;
                i += 1;
                if i + 1 == path.len() {
                    break path[i];
                }
            }
        }
    };
    (target - p).normalized()
}

fn clearance(robot: Vec2, obstacles: &[ObstacleState], robot_radius: f64) -> f64 {
    obstacles
        .iter()
        .map(|o| robot.distance(o.position) - o.radius - robot_radius)
        .fold(f64::INFINITY, f64::min)
}

/// Minimum clearance over `steps` steps holding `action`, with obstacles
/// following their own law.
fn predicted_clearance(
    robot: &Pose2,
    action: Action,
    obstacles: &[ObstacleState],
    arena: &Arena,
    time: f64,
    steps: usize,
    cfg: &TrialConfig,
) -> f64 {
    let mut pose = *robot;
    let mut obs = obstacles.to_vec();
    let mut worst = f64::INFINITY;
    for k in 0..steps {
        pose = action.integrate(&pose, cfg.dt);
        let t = time + k as f64 * cfg.dt;
        for o in &mut obs {
            o.step(arena, t, cfg.dt);
        }
        worst = worst.min(clearance(pose.position(), &obs, cfg.robot_radius));
    }
    worst
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Guard {
    Nominal,
    Halted,
    Reversing,
}

struct Safety<'a> {
    cfg: &'a TrialConfig,
    steps: usize,
    state: Guard,
}

impl<'a> Safety<'a> {
    fn new(cfg: &'a TrialConfig) -> Self {
        let steps = ((cfg.safety.lookahead / cfg.dt).ceil() as usize).max(1);
        Self { cfg, steps, state: Guard::Nominal }
    }

    /// Returns the command to execute and whether the planner was overridden.
    fn filter(&mut self, robot: &Pose2, wanted: Action, obstacles: &[ObstacleState], arena: &Arena, time: f64) -> (Action, bool) {
        let s = &self.cfg.safety;
        if !s.enabled {
            return (wanted, false);
        }
        let predict = |a: Action| predicted_clearance(robot, a, obstacles, arena, time, self.steps, self.cfg);
        if predict(wanted) >= s.margin {
            self.state = Guard::Nominal;
            return (wanted, false);
        }
        let fallback = match self.state {
            Guard::Nominal => {
                self.state = Guard::Halted;
                Action::ZERO
            }
            Guard::Halted | Guard::Reversing => {
                self.state = Guard::Reversing;
                Action::new(-s.reverse_speed, 0.0)
            }
        };
        if !s.evasive || predict(fallback) >= s.margin {
            return (fallback, true);
        }
        let mut best = (predict(fallback), fallback);
        for &v in &s.evasive_speeds {
            for &w in &s.evasive_turn_rates {
                let a = Action::new(v, w);
                let c = predict(a);
                if c > best.0 {
                    best = (c, a);
                }
            }
        }
        (best.1, true)
    }
}

/// Runs one closed-loop trial. `seed` drives sensor noise only.
pub fn run_trial(world: &WorldSpec, planner: &mut dyn Planner, cfg: &TrialConfig, seed: u64) -> Result<TrialResult> {
    run_trial_traced(world, planner, cfg, seed).map(|(r, _)| r)
}

pub fn run_trial_traced(
    world: &WorldSpec,
    planner: &mut dyn Planner,
    cfg: &TrialConfig,
    seed: u64,
) -> Result<(TrialResult, TrialTrace)> {
    cfg.validate()?;
    world.validate()?;
    let mut rng = rng_from_seed(seed);
    let noise = (cfg.lidar.range_noise_sigma > 0.0)
        .then(|| Normal::new(0.0, cfg.lidar.range_noise_sigma).expect("validated sigma"));
    let path = [world.start.position(), world.goal];
    let mut obstacles: Vec<ObstacleState> = world.obstacles.iter().map(ObstacleState::new).collect();
    let mut robot = world.start;
    let mut safety = Safety::new(cfg);
    let mut scans: VecDeque<Vec<f64>> = VecDeque::with_capacity(cfg.m_l);
    let mut past: VecDeque<Action> = std::iter::repeat_n(Action::ZERO, cfg.m_l).collect();
    let deadline = Duration::from_millis(cfg.planner_deadline_ms);
    let mut trace = TrialTrace { poses: vec![robot], actions: Vec::new() };
    let mut min_clear = clearance(robot.position(), &obstacles, cfg.robot_radius);
    let mut path_length = 0.0;
    let mut overrides = 0;
    let mut diagnostic = None;
    let max_steps = cfg.max_steps();
    let mut step = 0;

    let outcome = loop {
        if min_clear < 0.0 {
            break Outcome::Collision;
        }
        if robot.position().distance(world.goal) <= cfg.goal_tolerance {
            break Outcome::Success;
        }
        if step >= max_steps {
            break Outcome::Timeout;
        }
        let time = step as f64 * cfg.dt;
        let snapshot: Vec<Obstacle> = obstacles.iter().map(ObstacleState::obstacle).collect();
        let mut ranges = raycast(&robot, &snapshot, &cfg.lidar)?.ranges;
        if let Some(n) = &noise {
            for r in &mut ranges {
                *r = (*r + n.sample(&mut rng)).clamp(crate::render::MIN_RANGE, cfg.lidar.max_range);
            }
        }
        if scans.is_empty() {
            scans.extend(std::iter::repeat_n(ranges, cfg.m_l));
        } else {
            scans.pop_front();
            scans.push_back(ranges);
        }
        let goal = goal_lookahead(&path, &robot, cfg.lookahead_distance)
            .map_or(Vec2::ZERO, |g| g.rotate(-robot.heading()));
        let input = PlannerInput { scans: scans.iter().cloned().collect(), past_actions: past.iter().copied().collect(), goal };
        let started = Instant::now();
        let planned = match planner.plan(&input, cfg.m_a) {
            Ok(a) if started.elapsed() > deadline => {
                diagnostic = Some(format!("planner exceeded {} ms at step {step}", cfg.planner_deadline_ms));
                drop(a);
                break Outcome::Timeout;
            }
            Ok(a) if a.len() == cfg.m_a && a.iter().all(Action::is_finite) => a,
            Ok(a) => {
                diagnostic = Some(format!("planner returned {} actions at step {step}", a.len()));
                break Outcome::Timeout;
            }
            Err(e) => {
                diagnostic = Some(format!("planner failed at step {step}: {e}"));
                break Outcome::Timeout;
            }
        };
        let (action, overridden) = safety.filter(&robot, planned[0], &obstacles, &world.arena, time);
        overrides += overridden as usize;
        let next = action.integrate(&robot, cfg.dt);
        path_length += next.position().distance(robot.position());
        robot = next;
        for o in &mut obstacles {
            o.step(&world.arena, time, cfg.dt);
        }
        past.pop_front();
        past.push_back(action);
        trace.poses.push(robot);
        trace.actions.push(action);
        min_clear = min_clear.min(clearance(robot.position(), &obstacles, cfg.robot_radius));
        step += 1;
    };
    let result = TrialResult {
        outcome,
        elapsed: step as f64 * cfg.dt,
        min_clearance_seen: min_clear,
        path_length,
        steps: step,
        safety_overrides: overrides,
        diagnostic,
    };
    Ok((result, trace))
}

/// `successes / total` with a two-decimal percentage display.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rate {
    pub successes: usize,
    pub total: usize,
}

impl Rate {
    pub fn fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.successes as f64 / self.total as f64
        }
    }
}

impl fmt::Display for Rate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2}%", 100.0 * self.fraction())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuccessSummary {
    pub overall: Rate,
    pub per_tier: BTreeMap<Tier, Rate>,
}

/// Overall and per-tier success rates for `(tier, result)` pairs.
pub fn success_rate<'a>(results: impl IntoIterator<Item = (Tier, &'a TrialResult)>) -> SuccessSummary {
    let mut overall = Rate { successes: 0, total: 0 };
    let mut per_tier: BTreeMap<Tier, Rate> = BTreeMap::new();
    for (tier, r) in results {
        let hit = (r.outcome == Outcome::Success) as usize;
        overall.successes += hit;
        overall.total += 1;
        let e = per_tier.entry(tier).or_insert(Rate { successes: 0, total: 0 });
        e.successes += hit;
        e.total += 1;
    }
    SuccessSummary { overall, per_tier }
}

impl fmt::Display for SuccessSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "overall {}/{} ({})", self.overall.successes, self.overall.total, self.overall)?;
        for (tier, r) in &self.per_tier {
            write!(f, "; {tier} {}/{} ({r})", r.successes, r.total)?;
        }
        Ok(())
    }
}

/// One scheduled run: world index and trial number.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrialJob {
    pub world: usize,
    pub trial: usize,
}

/// Every `(world, trial)` pair in world-major order.
pub fn schedule(worlds: usize, trials_per_world: usize) -> Vec<TrialJob> {
    (0..worlds).flat_map(|world| (0..trials_per_world).map(move |trial| TrialJob { world, trial })).collect()
}

/// Sensor-noise seed for one scheduled trial.
pub fn trial_seed(world: &WorldSpec, trial: usize) -> u64 {
    child_seed(world.seed, "trial", trial as u64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn empty_world(goal: Vec2) -> WorldSpec {
        WorldSpec {
            id: "w".into(),
            arena: Arena { min: Vec2::new(-5.0, -5.0), max: Vec2::new(5.0, 5.0) },
            start: Pose2::ORIGIN,
            goal,
            obstacles: vec![],
            difficulty: Tier::Easy,
            seed: 0,
        }
    }

    #[test]
    fn default_tiers() {
        let worlds = generate_worlds(&WorldConfig::default(), 3).unwrap();
        assert_eq!(worlds.len(), 60);
        for (tier, n) in [(Tier::Easy, 20), (Tier::Medium, 20), (Tier::Hard, 20)] {
            assert_eq!(worlds.iter().filter(|w| w.difficulty == tier).count(), n);
        }
        for w in worlds.iter().filter(|w| w.difficulty == Tier::Easy) {
            assert!((5..=10).contains(&w.obstacles.len()));
            assert!(w.obstacles.iter().all(|o| (0.5..=1.0).contains(&o.speed)));
        }
        for w in &worlds {
            for o in &w.obstacles {
                assert!(o.position.distance(w.start.position()) > 1.0 + o.radius);
                assert!(o.position.distance(w.goal) > 1.0 + o.radius);
            }
        }
        assert_eq!(worlds, generate_worlds(&WorldConfig::default(), 3).unwrap());
    }

    #[test]
    fn tiny_arena_is_rejected() {
        let cfg = WorldConfig {
            arena: Arena { min: Vec2::ZERO, max: Vec2::new(2.0, 2.0) },
            edge_offset: 0.5,
            max_placement_attempts: 100,
            ..Default::default()
        };
        assert!(matches!(generate_worlds(&cfg, 0), Err(Error::ArenaTooSmall(_))));
    }

    #[test]
    fn reflection_keeps_speed() {
        let arena = Arena { min: Vec2::ZERO, max: Vec2::new(3.0, 2.0) };
        let spec = ObstacleSpec {
            position: Vec2::new(1.0, 1.0),
            speed: 1.7,
            heading: 0.7,
            radius: 0.3,
            wobble: Some(Wobble { amplitude: 0.4, period: 2.0 }),
        };
        let mut o = ObstacleState::new(&spec);
        for k in 0..2000 {
            o.step(&arena, k as f64 * 0.05, 0.05);
            assert!(o.position.x >= 0.3 - 1e-12 && o.position.x <= 2.7 + 1e-12);
            assert!(o.position.y >= 0.3 - 1e-12 && o.position.y <= 1.7 + 1e-12);
            assert!((o.velocity(k as f64 * 0.05).norm() - 1.7).abs() < 1e-12);
        }
    }

    #[test]
    fn lookahead_examples() {
        let path = [Vec2::ZERO, Vec2::new(10.0, 0.0)];
        let g = goal_lookahead(&path, &Pose2::ORIGIN, 2.25).unwrap();
        assert!((g - Vec2::new(1.0, 0.0)).norm() < 1e-12);
        let near = Pose2::new(9.5, 0.0, 0.0);
        assert!((goal_lookahead(&path, &near, 2.25).unwrap() - Vec2::new(1.0, 0.0)).norm() < 1e-12);
        let off = Pose2::new(3.0, 1.0, 0.0);
        let want = (Vec2::new(5.25, 0.0) - Vec2::new(3.0, 1.0)).normalized().unwrap();
        assert!((goal_lookahead(&path, &off, 2.25).unwrap() - want).norm() < 1e-12);
        assert!(goal_lookahead(&path, &Pose2::new(10.0, 0.0, 0.0), 2.25).is_none());
    }

    #[test]
    fn straight_drive_succeeds() {
        let world = empty_world(Vec2::new(2.0, 0.0));
        let cfg = TrialConfig::default();
        let r = run_trial(&world, &mut ConstantPlanner(Action::new(1.0, 0.0)), &cfg, 1).unwrap();
        assert_eq!(r.outcome, Outcome::Success);
        // Success triggers inside the 0.5 m tolerance.
        assert!((r.elapsed - 1.5).abs() <= cfg.dt + 1e-9);
    }

    #[test]
    fn blocked_goal_times_out_without_contact() {
        let mut world = empty_world(Vec2::new(2.0, 0.0));
        world.obstacles.push(ObstacleSpec { position: Vec2::new(2.0, 0.0), speed: 0.0, heading: 0.0, radius: 0.5, wobble: None });
        let cfg = TrialConfig { timeout: 10.0, ..Default::default() };
        let r = run_trial(&world, &mut ConstantPlanner(Action::new(1.0, 0.0)), &cfg, 1).unwrap();
        assert_eq!(r.outcome, Outcome::Timeout);
        assert!(r.min_clearance_seen >= 0.0);
        assert!(r.safety_overrides > 0);
    }

    #[test]
    fn replay_reproduces_recorded_run() {
        let worlds = generate_worlds(&WorldConfig::default(), 11).unwrap();
        let cfg = TrialConfig::default();
        let (first, trace) = run_trial_traced(&worlds[0], &mut GapFollower::default(), &cfg, 5).unwrap();
        let again = run_trial(&worlds[0], &mut GapFollower::default(), &cfg, 5).unwrap();
        assert_eq!(first, again);
        if first.outcome == Outcome::Success {
            let cfg = TrialConfig { safety: SafetyConfig { enabled: false, ..Default::default() }, ..cfg };
            let replay = run_trial(&worlds[0], &mut ReplayPlanner::new(trace.actions), &cfg, 5).unwrap();
            assert_eq!(replay.outcome, Outcome::Success);
        }
    }

    #[test]
    fn rate_formatting() {
        assert_eq!(Rate { successes: 37, total: 120 }.to_string(), "30.83%");
        assert_eq!(Rate { successes: 27, total: 120 }.to_string(), "22.50%");
        assert_eq!(Rate { successes: 4, total: 4 }.fraction(), 1.0);
    }

    #[test]
    fn schedule_counts() {
        assert_eq!(schedule(60, 2).len(), 120);
    }
}
