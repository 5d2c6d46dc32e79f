//! Parameter-free decoder: given temporally masked circular obstacles, find the
//! waypoint sequence from the origin to the goal that trades off smoothness
//! against a cubic penetration penalty.
//!
//! The objective over waypoint positions `q_0..q_{H-1}` is
//!
//! ```text
//! J = w_s Σ_{t=1}^{H-2} |q_{t+1} - 2 q_t + q_{t-1}|²
//!   + w_c Σ_t Σ_i max(0, m_i^t (r_i + c) - |q_t - o_i|)³
//! ```
//!
//! with `q_0` pinned to the origin and `q_{H-1}` to the goal. A mask entry of
//! zero removes obstacle `i` at time `t` entirely.
//!
//! Minimization is descent from the straight line along a Gauss-Newton
//! preconditioned gradient (banded, `O(H)` per step) with step halving, so
//! `J` never increases between iterations.

use serde::{Deserialize, Serialize};

use crate::banded::BandedSpd;
use crate::error::GeometryError;
use crate::geometry::{Obstacle, Plan, Vec2};

const MAX_HALVINGS: usize = 30;
const REL_TOL: f64 = 1e-10;
/// Largest waypoint displacement of a full step (m).
const MAX_DISPLACEMENT: f64 = 0.25;

/// Per-timestep presence of an obstacle, every entry in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct TemporalMask(Vec<f64>);

impl TemporalMask {
    pub fn new(values: Vec<f64>) -> Result<Self, GeometryError> {
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(GeometryError::InvalidPlan("mask entries must lie in [0, 1]".into()));
        }
        Ok(Self(values))
    }

    pub fn ones(h: usize) -> Self {
        Self(vec![1.0; h])
    }

    /// The all-absent sentinel.
    pub fn zeros(h: usize) -> Self {
        Self(vec![0.0; h])
    }

    /// Presence at a single 0-based index.
    pub fn one_hot(h: usize, index: usize) -> Self {
        let mut v = vec![0.0; h];
        v[index] = 1.0;
        Self(v)
    }

    /// Rescales non-negative weights by their maximum so the peak is exactly 1.
    pub fn from_weights(weights: &[f64]) -> Self {
        let max = weights.iter().copied().fold(0.0, f64::max);
        if max <= 0.0 {
            return Self::zeros(weights.len());
        }
        Self(weights.iter().map(|w| (w / max).clamp(0.0, 1.0)).collect())
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// First index of the maximum entry.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

impl TryFrom<Vec<f64>> for TemporalMask {
    type Error = GeometryError;
    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<TemporalMask> for Vec<f64> {
    fn from(m: TemporalMask) -> Self {
        m.0
    }
}

/// Index of the largest value, lowest index on ties. Empty input maps to 0.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedObstacle {
    pub obstacle: Obstacle,
    pub mask: TemporalMask,
}

impl MaskedObstacle {
    pub fn new(obstacle: Obstacle, mask: TemporalMask) -> Self {
        Self { obstacle, mask }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub smoothness_weight: f64,
    pub collision_weight: f64,
    /// Margin added to every obstacle radius before masking. The default
    /// exceeds the robot radius so decoded plans leave room for its footprint.
    pub safety_clearance: f64,
    pub iterations: usize,
    pub initial_step: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            smoothness_weight: 1.0,
            collision_weight: 100.0,
            safety_clearance: 0.3,
            iterations: 300,
            initial_step: 1.0,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<(), GeometryError> {
        let ok = self.smoothness_weight >= 0.0
            && self.collision_weight >= 0.0
            && self.safety_clearance >= 0.0
            && self.iterations >= 1
            && self.initial_step > 0.0
            && self.smoothness_weight.is_finite()
            && self.collision_weight.is_finite()
            && self.safety_clearance.is_finite()
            && self.initial_step.is_finite();
        if ok {
            Ok(())
        } else {
            Err(GeometryError::InvalidPlan(format!("invalid decoder configuration {self:?}")))
        }
    }
}

/// Output of [`decode`].
#[derive(Debug, Clone)]
pub struct Decoded {
    pub plan: Plan,
    /// Objective after initialization and after every accepted step.
    pub cost_history: Vec<f64>,
    /// The goal lies inside a fully present obstacle at the final timestep.
    pub unreachable_goal: bool,
}

impl Decoded {
    pub fn cost(&self) -> f64 {
        *self.cost_history.last().unwrap_or(&0.0)
    }
}

/// Evenly spaced waypoints from the origin to `goal`. The first pose keeps
/// zero heading; later poses face along the segment.
pub fn straight_line_plan(goal: Vec2, horizon: usize, dt: f64) -> Result<Plan, GeometryError> {
    Plan::from_positions(&straight_line(goal, horizon)?, dt)
}

pub(crate) fn straight_line(goal: Vec2, horizon: usize) -> Result<Vec<Vec2>, GeometryError> {
    if horizon < 2 {
        return Err(GeometryError::InvalidPlan(format!("horizon must be at least 2, got {horizon}")));
    }
    if !goal.is_finite() {
        return Err(GeometryError::NonFinite("goal"));
    }
    let last = (horizon - 1) as f64;
    Ok((0..horizon)
        .map(|t| {
            if t == horizon - 1 {
                goal
            } else {
                goal * (t as f64 / last)
            }
        })
        .collect())
}

/// Obstacle view used inside the optimizer: centre and unmasked inflated radius.
struct Inflated<'a> {
    center: Vec2,
    reach: f64,
    mask: &'a [f64],
}

fn inflate<'a>(
    obstacles: &'a [MaskedObstacle],
    horizon: usize,
    config: &DecoderConfig,
) -> Result<Vec<Inflated<'a>>, GeometryError> {
    obstacles
        .iter()
        .map(|o| {
            if o.mask.len() != horizon {
                return Err(GeometryError::HorizonMismatch { expected: horizon, got: o.mask.len() });
            }
            Ok(Inflated {
                center: o.obstacle.center,
                reach: o.obstacle.radius + config.safety_clearance,
                mask: o.mask.values(),
            })
        })
        .collect()
}

fn smoothness_cost(q: &[Vec2]) -> f64 {
    q.windows(3).map(|w| (w[2] - w[1] * 2.0 + w[0]).norm_sq()).sum()
}

fn collision_cost(q: &[Vec2], obstacles: &[Inflated]) -> f64 {
    let mut total = 0.0;
    for o in obstacles {
        for (t, p) in q.iter().enumerate() {
            let m = o.mask[t];
            if m <= 0.0 {
                continue;
            }
            let h = m * o.reach - p.distance(o.center);
            if h > 0.0 {
                total += h * h * h;
            }
        }
    }
    total
}

fn total_cost(q: &[Vec2], obstacles: &[Inflated], config: &DecoderConfig) -> f64 {
    config.smoothness_weight * smoothness_cost(q) + config.collision_weight * collision_cost(q, obstacles)
}

/// Gradient of `J` with respect to every waypoint (endpoint entries included).
fn gradient(q: &[Vec2], obstacles: &[Inflated], config: &DecoderConfig) -> Vec<Vec2> {
    let mut g = vec![Vec2::ZERO; q.len()];
    let ws = config.smoothness_weight;
    for t in 1..q.len().saturating_sub(1) {
        let e = q[t + 1] - q[t] * 2.0 + q[t - 1];
        g[t - 1] += e * (2.0 * ws);
        g[t] += e * (-4.0 * ws);
        g[t + 1] += e * (2.0 * ws);
    }
    let wc = config.collision_weight;
    for o in obstacles {
        for (t, p) in q.iter().enumerate() {
            let m = o.mask[t];
            if m <= 0.0 {
                continue;
            }
            let diff = *p - o.center;
            let d = diff.norm();
            let h = m * o.reach - d;
            if h > 0.0 {
                let n = if d > 1e-12 { diff * (1.0 / d) } else { Vec2::new(1.0, 0.0) };
                g[t] += n * (-3.0 * wc * h * h);
            }
        }
    }
    g
}

/// Curvature over interior waypoints, interleaved `(x, y)`. Gauss-Newton
/// unless `exact`, which adds the (possibly negative) tangential terms of the
/// collision Hessian.
fn curvature(q: &[Vec2], obstacles: &[Inflated], config: &DecoderConfig, exact: bool) -> BandedSpd {
    let h = q.len();
    let n = 2 * (h - 2);
    let mut a = BandedSpd::zeros(n);
    let var = |t: usize| -> Option<usize> { (t >= 1 && t + 1 < h).then(|| 2 * (t - 1)) };
    let coeff = [1.0, -2.0, 1.0];
    let ws2 = 2.0 * config.smoothness_weight;
    for t in 1..h - 1 {
        for (j, cj) in coeff.iter().enumerate() {
            let Some(vj) = var(t + j - 1) else { continue };
            for (k, ck) in coeff.iter().enumerate().take(j + 1) {
                let Some(vk) = var(t + k - 1) else { continue };
                let v = ws2 * cj * ck;
                a.add(vj, vk, v);
                a.add(vj + 1, vk + 1, v);
            }
        }
    }
    let wc6 = 6.0 * config.collision_weight;
    for o in obstacles {
        for t in 1..h - 1 {
            let m = o.mask[t];
            if m <= 0.0 {
                continue;
            }
            let diff = q[t] - o.center;
            let d = diff.norm();
            let pen = m * o.reach - d;
            if pen > 0.0 {
                let nrm = if d > 1e-12 { diff * (1.0 / d) } else { Vec2::new(1.0, 0.0) };
                let k = wc6 * pen;
                let i = 2 * (t - 1);
                a.add(i, i, k * nrm.x * nrm.x);
                a.add(i + 1, i, k * nrm.x * nrm.y);
                a.add(i + 1, i + 1, k * nrm.y * nrm.y);
                if exact && d > 1e-12 {
                    let tk = -0.5 * wc6 * pen * pen / d;
                    a.add(i, i, tk * (1.0 - nrm.x * nrm.x));
                    a.add(i + 1, i, -tk * nrm.x * nrm.y);
                    a.add(i + 1, i + 1, tk * (1.0 - nrm.y * nrm.y));
                }
            }
        }
    }
    if exact {
        return a;
    }
    let damping = 1e-9 * (1.0 + a.max_diag());
    a.add_diag(damping);
    a
}

/// First-order sensitivity of a loss on decoded waypoints to the obstacle
/// parameters, by implicit differentiation of the decoder's optimality
/// condition.
#[derive(Debug, Clone, PartialEq)]
pub struct Sensitivity {
    /// `dL/d centre` per obstacle.
    pub center: Vec<Vec2>,
    /// `dL/d m_t` per obstacle and timestep.
    pub mask: Vec<Vec<f64>>,
}

/// Sensitivities of a loss with gradient `dl_dq` (per waypoint) at the
/// decoder output `q`. Endpoint entries of `dl_dq` are ignored. Assumes `q`
/// is a local minimum of `J`; an indefinite Hessian is damped until it
/// factors.
pub fn plan_sensitivity(
    q: &[Vec2],
    obstacles: &[MaskedObstacle],
    config: &DecoderConfig,
    dl_dq: &[Vec2],
) -> Result<Sensitivity, GeometryError> {
    let horizon = q.len();
    if dl_dq.len() != horizon {
        return Err(GeometryError::HorizonMismatch { expected: horizon, got: dl_dq.len() });
    }
    let inflated = inflate(obstacles, horizon, config)?;
    let mut sens = Sensitivity {
        center: vec![Vec2::ZERO; obstacles.len()],
        mask: vec![vec![0.0; horizon]; obstacles.len()],
    };
    if horizon <= 2 {
        return Ok(sens);
    }
    let base = curvature(q, &inflated, config, true);
    let scale = 1.0 + base.max_diag();
    let mut damping = 0.0;
    let chol = loop {
        let mut a = base.clone();
        a.add_diag(damping);
        if let Some(c) = a.factor() {
            break c;
        }
        damping = if damping == 0.0 { 1e-9 * scale } else { damping * 10.0 };
        if damping > 1e3 * scale {
            return Err(GeometryError::InvalidPlan("decoder Hessian could not be factored".into()));
        }
    };
    let mut lambda = vec![0.0; 2 * (horizon - 2)];
    for t in 1..horizon - 1 {
        lambda[2 * (t - 1)] = dl_dq[t].x;
        lambda[2 * (t - 1) + 1] = dl_dq[t].y;
    }
    chol.solve(&mut lambda);

    let wc = config.collision_weight;
    for (i, o) in inflated.iter().enumerate() {
        for t in 1..horizon - 1 {
            let m = o.mask[t];
            if m <= 0.0 {
                continue;
            }
            let diff = q[t] - o.center;
            let d = diff.norm();
            let pen = m * o.reach - d;
            if pen <= 0.0 || d <= 1e-12 {
                continue;
            }
            let n = diff * (1.0 / d);
            let l = Vec2::new(lambda[2 * (t - 1)], lambda[2 * (t - 1) + 1]);
            let ln = l.dot(n);
            // H_it λ with H_it = 3 wc (2 pen n nᵀ - pen² (I - n nᵀ) / d).
            let radial = n * (6.0 * wc * pen * ln);
            let tangential = (l - n * ln) * (-3.0 * wc * pen * pen / d);
            sens.center[i] += radial + tangential;
            sens.mask[i][t] = 6.0 * wc * pen * o.reach * ln;
        }
    }
    Ok(sens)
}

/// Objective `J` evaluated at raw waypoint positions.
pub fn objective(
    positions: &[Vec2],
    obstacles: &[MaskedObstacle],
    config: &DecoderConfig,
) -> Result<f64, GeometryError> {
    let inflated = inflate(obstacles, positions.len(), config)?;
    Ok(total_cost(positions, &inflated, config))
}

/// Gradient of [`objective`] with respect to each waypoint. The decoder only
/// moves interior waypoints; endpoint entries are reported for completeness.
pub fn objective_gradient(
    positions: &[Vec2],
    obstacles: &[MaskedObstacle],
    config: &DecoderConfig,
) -> Result<Vec<Vec2>, GeometryError> {
    let inflated = inflate(obstacles, positions.len(), config)?;
    Ok(gradient(positions, &inflated, config))
}

/// The exact objective the decoder minimizes, evaluated on an existing plan.
pub fn plan_cost(
    plan: &Plan,
    obstacles: &[MaskedObstacle],
    config: &DecoderConfig,
) -> Result<f64, GeometryError> {
    objective(&plan.positions(), obstacles, config)
}

/// Plans from the origin to `goal` around the masked obstacles.
pub fn decode(
    obstacles: &[MaskedObstacle],
    goal: Vec2,
    horizon: usize,
    dt: f64,
    config: &DecoderConfig,
) -> Result<Decoded, GeometryError> {
    let (q, cost_history, unreachable_goal) = solve(obstacles, goal, horizon, config)?;
    Ok(Decoded { plan: Plan::from_positions(&q, dt)?, cost_history, unreachable_goal })
}

/// Waypoint positions of [`decode`] without building headings and actions.
pub fn decode_positions(
    obstacles: &[MaskedObstacle],
    goal: Vec2,
    horizon: usize,
    config: &DecoderConfig,
) -> Result<Vec<Vec2>, GeometryError> {
    solve(obstacles, goal, horizon, config).map(|(q, _, _)| q)
}

fn solve(
    obstacles: &[MaskedObstacle],
    goal: Vec2,
    horizon: usize,
    config: &DecoderConfig,
) -> Result<(Vec<Vec2>, Vec<f64>, bool), GeometryError> {
    config.validate()?;
    let mut q = straight_line(goal, horizon)?;
    let inflated = inflate(obstacles, horizon, config)?;
    let unreachable_goal = inflated
        .iter()
        .any(|o| o.mask[horizon - 1] >= 1.0 && goal.distance(o.center) < o.reach);

    let mut cost = total_cost(&q, &inflated, config);
    let mut history = vec![cost];
    // The straight line minimizes smoothness exactly; with no active
    // penetration it is the global optimum.
    if collision_cost(&q, &inflated) == 0.0 || horizon <= 2 {
        return Ok((q, history, unreachable_goal));
    }

    let n = 2 * (horizon - 2);
    let mut dir = vec![0.0; n];
    let mut trial = q.clone();
    for _ in 0..config.iterations {
        let g = gradient(&q, &inflated, config);
        for t in 1..horizon - 1 {
            dir[2 * (t - 1)] = -g[t].x;
            dir[2 * (t - 1) + 1] = -g[t].y;
        }
        // A numerically singular curvature leaves the raw gradient in place.
        if let Some(chol) = curvature(&q, &inflated, config, false).factor() {
            chol.solve(&mut dir);
        }
        let longest = dir.chunks(2).map(|d| d[0].hypot(d[1])).fold(0.0, f64::max);
        if longest > MAX_DISPLACEMENT {
            let k = MAX_DISPLACEMENT / longest;
            dir.iter_mut().for_each(|d| *d *= k);
        }
        let mut step = config.initial_step;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            for t in 1..horizon - 1 {
                trial[t] = q[t] + Vec2::new(dir[2 * (t - 1)], dir[2 * (t - 1) + 1]) * step;
            }
            let c = total_cost(&trial, &inflated, config);
            if c < cost {
                accepted = Some(c);
                break;
            }
            step *= 0.5;
        }
        let Some(new_cost) = accepted else { break };
        let rel = (cost - new_cost) / cost.abs().max(f64::MIN_POSITIVE);
        std::mem::swap(&mut q, &mut trial);
        trial.copy_from_slice(&q);
        cost = new_cost;
        history.push(cost);
        if rel < REL_TOL {
            break;
        }
    }
    Ok((q, history, unreachable_goal))
}

/// Convenience: decode against static obstacles present at every timestep.
pub fn decode_static(
    obstacles: &[Obstacle],
    goal: Vec2,
    horizon: usize,
    dt: f64,
    config: &DecoderConfig,
) -> Result<Decoded, GeometryError> {
    let masked: Vec<_> = obstacles
        .iter()
        .map(|o| MaskedObstacle::new(*o, TemporalMask::ones(horizon)))
        .collect();
    decode(&masked, goal, horizon, dt, config)
}
