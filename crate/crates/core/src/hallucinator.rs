//! Per-plan inference of obstacle hypotheses: where obstacles must be (phase 1)
//! and when they must be present (phase 2), followed by critical-point
//! extraction.
//!
//! Each hypothesis is a Gaussian over an obstacle centre plus one presence
//! logit per timestep. The objective is the expected reconstruction error
//! between the input plan and the decoder's plan around sampled obstacles,
//! plus a Gaussian prior that keeps centres near the plan and overlap
//! penalties between obstacles and against the plan.
//!
//! The decoder is treated as a black box. Gradients come from simultaneous
//! perturbation (SPSA) with common random numbers, switching to central
//! finite differences over the geometric parameters for the last stretch of
//! every phase. A step is only taken if it lowers the objective on a fixed
//! reference draw set, so the reported objective never increases.

use rand::Rng;
use rand_distr::{Distribution, Gumbel, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::decoder::{argmax, decode_positions, plan_sensitivity, straight_line, DecoderConfig, MaskedObstacle, TemporalMask};
use crate::error::{Error, Result};
use crate::geometry::{position_mse, Obstacle, Plan, Vec2, DEFAULT_ROBOT_RADIUS};

/// Lower-triangular Cholesky factor of a 2×2 covariance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Chol2 {
    pub l11: f64,
    pub l21: f64,
    pub l22: f64,
}

impl Chol2 {
    pub fn isotropic(sigma: f64) -> Self {
        Self { l11: sigma, l21: 0.0, l22: sigma }
    }

    /// `L ε`.
    #[inline]
    pub fn apply(&self, e: [f64; 2]) -> Vec2 {
        Vec2::new(self.l11 * e[0], self.l21 * e[0] + self.l22 * e[1])
    }

    /// `Σ = L Lᵀ` as `[[s11, s12], [s12, s22]]`.
    pub fn covariance(&self) -> [[f64; 2]; 2] {
        let s11 = self.l11 * self.l11;
        let s12 = self.l11 * self.l21;
        let s22 = self.l21 * self.l21 + self.l22 * self.l22;
        [[s11, s12], [s12, s22]]
    }
}

/// Hallucinated obstacle: centre distribution and temporal-presence logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObstacleHypothesis {
    pub mu: Vec2,
    pub chol: Chol2,
    pub alpha: Vec<f64>,
}

impl ObstacleHypothesis {
    /// 0-based index of the critical timestep (`argmax α`, lowest index on ties).
    pub fn critical_index(&self) -> usize {
        argmax(&self.alpha)
    }

    /// One-hot presence mask at the critical timestep.
    pub fn hard_mask(&self) -> TemporalMask {
        TemporalMask::one_hot(self.alpha.len(), self.critical_index())
    }

    pub fn sample_position<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec2 {
        self.mu + self.chol.apply([rng.sample(StandardNormal), rng.sample(StandardNormal)])
    }
}

/// Where and when an obstacle must appear. `t_crit` is 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriticalPoint {
    pub x: f64,
    pub y: f64,
    pub t_crit: usize,
}

impl CriticalPoint {
    pub fn position(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }

    /// Decoder input for this point: a disc present only at `t_crit`.
    pub fn masked_obstacle(&self, radius: f64, horizon: usize) -> Result<MaskedObstacle> {
        if self.t_crit == 0 || self.t_crit > horizon {
            return Err(Error::InvalidInput(format!(
                "critical time {} outside horizon 1..={horizon}",
                self.t_crit
            )));
        }
        Ok(MaskedObstacle::new(
            Obstacle::new(self.position(), radius)?,
            TemporalMask::one_hot(horizon, self.t_crit - 1),
        ))
    }
}

/// How the optimizer obtains gradients through the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMethod {
    /// Simultaneous perturbation, then central finite differences per
    /// obstacle for the final `fd_fraction` of iterations.
    Spsa,
    /// Implicit differentiation of the decoder's optimality condition.
    Implicit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HallucinationConfig {
    pub n_obstacles: usize,
    pub radius: f64,
    pub phase1_iters: usize,
    pub phase2_anneal_iters: usize,
    pub phase2_hard_iters: usize,
    pub tau_start: f64,
    pub tau_end: f64,
    pub prior_weight: f64,
    pub overlap_weight: f64,
    pub samples_per_eval: usize,
    pub seed: u64,
    pub robot_radius: f64,
    /// Keep optimizing centres and covariances while learning presence logits.
    pub refine_geometry_in_phase2: bool,
    /// Initial standard deviation of every centre distribution (m).
    pub initial_sigma: f64,
    /// Scale of one optimizer unit for centre coordinates (m).
    pub position_scale: f64,
    /// Scale of one optimizer unit for raw Cholesky parameters.
    pub chol_scale: f64,
    /// Scale of one optimizer unit for presence logits.
    pub logit_scale: f64,
    /// SPSA perturbation size in optimizer units.
    pub perturbation: f64,
    /// Initial largest per-coordinate step, in optimizer units.
    pub initial_gain: f64,
    /// Presence logits are only perturbed at timesteps where the obstacle,
    /// fully present, comes within this distance of its reach from the plan
    /// or the straight line (m). Elsewhere the objective does not depend on them.
    pub logit_margin: f64,
    pub gradient: GradientMethod,
    /// Fraction of each phase's iterations that use finite differences.
    pub fd_fraction: f64,
    /// Finite-difference step in optimizer units.
    pub fd_step: f64,
    pub decoder: DecoderConfig,
}

impl Default for HallucinationConfig {
    fn default() -> Self {
        Self {
            n_obstacles: 10,
            radius: 0.5,
            phase1_iters: 1000,
            phase2_anneal_iters: 1000,
            phase2_hard_iters: 500,
            tau_start: 2048.0,
            tau_end: 0.1,
            prior_weight: 1e-6,
            overlap_weight: 0.1,
            samples_per_eval: 4,
            seed: 0,
            robot_radius: DEFAULT_ROBOT_RADIUS,
            refine_geometry_in_phase2: true,
            initial_sigma: 0.05,
            position_scale: 0.05,
            chol_scale: 0.1,
            logit_scale: 1.0,
            perturbation: 1.0,
            initial_gain: 1.0,
            logit_margin: 0.5,
            gradient: GradientMethod::Implicit,
            fd_fraction: 0.1,
            fd_step: 0.2,
            decoder: DecoderConfig::default(),
        }
    }
}

impl HallucinationConfig {
    /// Shortened schedule (200 / 200 / 100 iterations) for quick runs.
    pub fn reduced() -> Self {
        Self { phase1_iters: 200, phase2_anneal_iters: 200, phase2_hard_iters: 100, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("hallucination: {m}")));
        if !(self.tau_start > self.tau_end && self.tau_end > 0.0) {
            return bad("require tau_start > tau_end > 0");
        }
        if self.n_obstacles == 0 || self.samples_per_eval == 0 {
            return bad("counts must be at least 1");
        }
        if self.phase1_iters == 0 || self.phase2_anneal_iters == 0 || self.phase2_hard_iters == 0 {
            return bad("iteration counts must be at least 1");
        }
        if !(self.radius > 0.0 && self.initial_sigma > 0.0) {
            return bad("radius and initial sigma must be positive");
        }
        if !(self.prior_weight >= 0.0 && self.overlap_weight >= 0.0) {
            return bad("weights must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.fd_fraction) {
            return bad("fd_fraction must lie in [0, 1]");
        }
        if !(self.position_scale > 0.0
            && self.chol_scale > 0.0
            && self.logit_scale > 0.0
            && self.perturbation > 0.0
            && self.initial_gain > 0.0
            && self.fd_step > 0.0
            && self.logit_margin >= 0.0)
        {
            return bad("optimizer scales must be positive");
        }
        self.decoder.validate()?;
        Ok(())
    }
}

/// Geometric annealing temperature at iteration `k` of `total`.
pub fn tau_schedule(k: usize, total: usize, tau_start: f64, tau_end: f64) -> f64 {
    if total == 0 {
        return tau_end;
    }
    let frac = (k.min(total)) as f64 / total as f64;
    tau_start * (tau_end / tau_start).powf(frac)
}

/// Relaxed one-hot presence from logits: `softmax((α + g) / τ)` rescaled by
/// its maximum, with `g` standard Gumbel noise.
pub fn gumbel_softmax_mask<R: Rng + ?Sized>(alpha: &[f64], tau: f64, rng: &mut R) -> TemporalMask {
    let noise = gumbel_noise(alpha.len(), rng);
    gumbel_softmax_with_noise(alpha, tau, &noise)
}

pub fn gumbel_noise<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let g = Gumbel::new(0.0, 1.0).expect("unit Gumbel");
    (0..n).map(|_| g.sample(rng)).collect()
}

/// [`gumbel_softmax_mask`] with caller-supplied noise.
pub fn gumbel_softmax_with_noise(alpha: &[f64], tau: f64, noise: &[f64]) -> TemporalMask {
    let mut out = vec![0.0; alpha.len()];
    soft_mask_into(alpha, tau, noise, &mut out);
    TemporalMask::new(out).expect("entries lie in (0, 1]")
}

fn soft_mask_into(alpha: &[f64], tau: f64, noise: &[f64], out: &mut [f64]) {
    let zmax = alpha
        .iter()
        .zip(noise)
        .map(|(a, g)| (a + g) / tau)
        .fold(f64::NEG_INFINITY, f64::max);
    for ((o, a), g) in out.iter_mut().zip(alpha).zip(noise) {
        // Dividing softmax by its max is exp(z - z_max).
        *o = ((a + g) / tau - zmax).exp().max(f64::MIN_POSITIVE);
    }
}

/// Single Gaussian fitted to a plan's waypoints, used as a prior on obstacle centres.
#[derive(Debug, Clone, Copy)]
pub struct WaypointGaussian {
    pub mean: Vec2,
    pub cov: [[f64; 2]; 2],
    inv: [[f64; 2]; 2],
    log_norm: f64,
}

impl WaypointGaussian {
    /// Maximum-likelihood fit with `1e-6 I` added to the covariance.
    pub fn fit(points: &[Vec2]) -> Self {
        let n = points.len().max(1) as f64;
        let mean = points.iter().fold(Vec2::ZERO, |acc, p| acc + *p) * (1.0 / n);
        let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
        for p in points {
            let d = *p - mean;
            sxx += d.x * d.x;
            sxy += d.x * d.y;
            syy += d.y * d.y;
        }
        let cov = [[sxx / n + 1e-6, sxy / n], [sxy / n, syy / n + 1e-6]];
        let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
        let inv = [[cov[1][1] / det, -cov[0][1] / det], [-cov[1][0] / det, cov[0][0] / det]];
        let log_norm = (2.0 * std::f64::consts::PI).ln() + 0.5 * det.ln();
        Self { mean, cov, inv, log_norm }
    }

    pub fn neg_log_density(&self, p: Vec2) -> f64 {
        let d = p - self.mean;
        let q = d.x * (self.inv[0][0] * d.x + self.inv[0][1] * d.y)
            + d.y * (self.inv[1][0] * d.x + self.inv[1][1] * d.y);
        0.5 * q + self.log_norm
    }

    /// Gradient of [`Self::neg_log_density`].
    pub fn grad(&self, p: Vec2) -> Vec2 {
        let d = p - self.mean;
        Vec2::new(
            self.inv[0][0] * d.x + self.inv[0][1] * d.y,
            self.inv[1][0] * d.x + self.inv[1][1] * d.y,
        )
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec2 {
        let l11 = self.cov[0][0].sqrt();
        let l21 = self.cov[1][0] / l11;
        let l22 = (self.cov[1][1] - l21 * l21).max(0.0).sqrt();
        self.mean + Chol2 { l11, l21, l22 }.apply([rng.sample(StandardNormal), rng.sample(StandardNormal)])
    }
}

/// Summed negative log-density of `positions` under the Gaussian fitted to the plan.
pub fn gaussian_prior_penalty(positions: &[Vec2], plan: &Plan) -> f64 {
    let g = WaypointGaussian::fit(&plan.positions());
    positions.iter().map(|p| g.neg_log_density(*p)).sum()
}

/// Squared hinge penalties for obstacle–obstacle and obstacle–waypoint overlap.
pub fn overlap_penalty(positions: &[Vec2], radius: f64, plan: &Plan, robot_radius: f64) -> f64 {
    overlap_penalty_points(positions, radius, &plan.positions(), robot_radius)
}

fn overlap_penalty_points(positions: &[Vec2], radius: f64, waypoints: &[Vec2], robot_radius: f64) -> f64 {
    let hinge_sq = |x: f64| if x > 0.0 { x * x } else { 0.0 };
    let mut total = 0.0;
    for (i, a) in positions.iter().enumerate() {
        for b in &positions[i + 1..] {
            total += hinge_sq(2.0 * radius - a.distance(*b));
        }
    }
    let reach = radius + robot_radius;
    for p in positions {
        for q in waypoints {
            total += hinge_sq(reach - p.distance(*q));
        }
    }
    total
}

fn overlap_gradient(
    positions: &[Vec2],
    radius: f64,
    waypoints: &[Vec2],
    robot_radius: f64,
    weight: f64,
    out: &mut [Vec2],
) {
    let push = |d: Vec2, reach: f64| -> Vec2 {
        let dist = d.norm();
        let hinge = reach - dist;
        if hinge <= 0.0 || dist <= 1e-12 {
            return Vec2::ZERO;
        }
        d * (-2.0 * weight * hinge / dist)
    };
    for a in 0..positions.len() {
        for b in a + 1..positions.len() {
            let g = push(positions[a] - positions[b], 2.0 * radius);
            out[a] += g;
            out[b] += -g;
        }
        for q in waypoints {
            out[a] += push(positions[a] - *q, radius + robot_radius);
        }
    }
}

/// Objective trace of one optimization phase.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub iterations: usize,
    pub accepted_steps: usize,
    pub initial_objective: f64,
    pub final_objective: f64,
    pub initial_mse: f64,
    pub final_mse: f64,
    /// Reference-set objective after every iteration.
    pub objective_trace: Vec<f64>,
    /// Final objective did not improve on the initial one.
    pub non_improving: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Phase2Report {
    pub anneal: PhaseReport,
    pub hard: PhaseReport,
    /// Reconstruction MSE on the reference draws at the end of soft annealing.
    pub soft_end_mse: f64,
    /// Reconstruction MSE with one-hot masks after the hard iterations.
    pub hard_end_mse: f64,
}

/// One reparameterized draw: standard-normal centre noise and Gumbel mask noise per obstacle.
#[derive(Debug, Clone)]
struct Draw {
    eps: Vec<[f64; 2]>,
    gumbel: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum MaskMode {
    /// Present at every timestep.
    Full,
    Soft(f64),
    /// One-hot at `argmax α`.
    Hard,
}

const GEOM: usize = 5;

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y + (-(-y).exp_m1()).ln()
    }
}

/// Optimization state for one plan: flattened parameters
/// `[μx, μy, a, l21, b] × N` followed by `α` (N × H); `l11 = softplus(a)`,
/// `l22 = softplus(b)`.
struct Problem<'a> {
    cfg: &'a HallucinationConfig,
    waypoints: Vec<Vec2>,
    line: Vec<Vec2>,
    goal: Vec2,
    horizon: usize,
    prior: WaypointGaussian,
    n: usize,
}

struct Eval {
    objective: f64,
    mse: f64,
}

impl<'a> Problem<'a> {
    fn new(plan: &Plan, cfg: &'a HallucinationConfig) -> Self {
        let waypoints = plan.positions();
        let goal = plan.goal().position();
        Self {
            cfg,
            line: straight_line(goal, plan.horizon()).expect("plan horizon is at least 1"),
            goal,
            horizon: plan.horizon(),
            prior: WaypointGaussian::fit(&waypoints),
            waypoints,
            n: cfg.n_obstacles,
        }
    }

    fn geom_len(&self) -> usize {
        GEOM * self.n
    }

    fn pack(&self, hyps: &[ObstacleHypothesis]) -> Vec<f64> {
        let mut theta = Vec::with_capacity(self.geom_len() + self.n * self.horizon);
        for h in hyps {
            theta.extend_from_slice(&[
                h.mu.x,
                h.mu.y,
                softplus_inv(h.chol.l11),
                h.chol.l21,
                softplus_inv(h.chol.l22),
            ]);
        }
        for h in hyps {
            theta.extend_from_slice(&h.alpha);
        }
        theta
    }

    fn unpack(&self, theta: &[f64]) -> Vec<ObstacleHypothesis> {
        (0..self.n)
            .map(|i| {
                let g = &theta[GEOM * i..GEOM * (i + 1)];
                ObstacleHypothesis {
                    mu: Vec2::new(g[0], g[1]),
                    chol: Chol2 { l11: softplus(g[2]), l21: g[3], l22: softplus(g[4]) },
                    alpha: self.alpha(theta, i).to_vec(),
                }
            })
            .collect()
    }

    fn alpha<'t>(&self, theta: &'t [f64], i: usize) -> &'t [f64] {
        let start = self.geom_len() + i * self.horizon;
        &theta[start..start + self.horizon]
    }

    /// Timesteps at which obstacle `i` can touch the plan or the straight line.
    fn active_steps(&self, theta: &[f64], i: usize) -> impl Iterator<Item = usize> + '_ {
        let g = &theta[GEOM * i..GEOM * (i + 1)];
        let mu = Vec2::new(g[0], g[1]);
        let spread = 3.0 * (softplus(g[2]).max(softplus(g[4])) + g[3].abs());
        let reach = self.cfg.radius + self.cfg.decoder.safety_clearance + spread + self.cfg.logit_margin;
        (0..self.horizon).filter(move |&t| mu.distance(self.waypoints[t]).min(mu.distance(self.line[t])) <= reach)
    }

    fn scales(&self) -> Vec<f64> {
        let c = self.cfg;
        let mut s = Vec::with_capacity(self.geom_len() + self.n * self.horizon);
        for _ in 0..self.n {
            s.extend_from_slice(&[
                c.position_scale,
                c.position_scale,
                c.chol_scale,
                c.chol_scale,
                c.chol_scale,
            ]);
        }
        s.resize(self.geom_len() + self.n * self.horizon, c.logit_scale);
        s
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R, with_gumbel: bool) -> Draw {
        let eps = (0..self.n).map(|_| [rng.sample(StandardNormal), rng.sample(StandardNormal)]).collect();
        let gumbel = if with_gumbel {
            (0..self.n).map(|_| gumbel_noise(self.horizon, rng)).collect()
        } else {
            Vec::new()
        };
        Draw { eps, gumbel }
    }

    fn draws<R: Rng + ?Sized>(&self, rng: &mut R, with_gumbel: bool) -> Vec<Draw> {
        (0..self.cfg.samples_per_eval).map(|_| self.draw(rng, with_gumbel)).collect()
    }

    fn positions(&self, theta: &[f64], draw: &Draw) -> Vec<Vec2> {
        (0..self.n)
            .map(|i| {
                let g = &theta[GEOM * i..GEOM * (i + 1)];
                let chol = Chol2 { l11: softplus(g[2]), l21: g[3], l22: softplus(g[4]) };
                Vec2::new(g[0], g[1]) + chol.apply(draw.eps[i])
            })
            .collect()
    }

    /// Masks per obstacle. With `straight_through = Some(base)` the hard mask of
    /// `base` is shifted by the change in the soft mask between `theta` and `base`.
    fn masks(&self, theta: &[f64], draw: &Draw, mode: MaskMode, straight_through: Option<&[f64]>) -> Vec<Vec<f64>> {
        let h = self.horizon;
        (0..self.n)
            .map(|i| match mode {
                MaskMode::Full => vec![1.0; h],
                MaskMode::Soft(tau) => {
                    let mut m = vec![0.0; h];
                    soft_mask_into(self.alpha(theta, i), tau, &draw.gumbel[i], &mut m);
                    m
                }
                MaskMode::Hard => match straight_through {
                    None => {
                        let mut m = vec![0.0; h];
                        m[argmax(self.alpha(theta, i))] = 1.0;
                        m
                    }
                    Some(base) => {
                        let tau = self.cfg.tau_end;
                        let mut soft = vec![0.0; h];
                        let mut soft_base = vec![0.0; h];
                        soft_mask_into(self.alpha(theta, i), tau, &draw.gumbel[i], &mut soft);
                        soft_mask_into(self.alpha(base, i), tau, &draw.gumbel[i], &mut soft_base);
                        let hot = argmax(self.alpha(base, i));
                        (0..h)
                            .map(|t| {
                                let hard = if t == hot { 1.0 } else { 0.0 };
                                (hard + soft[t] - soft_base[t]).clamp(0.0, 1.0)
                            })
                            .collect()
                    }
                },
            })
            .collect()
    }

    fn evaluate(&self, theta: &[f64], mode: MaskMode, draws: &[Draw], straight_through: Option<&[f64]>) -> Result<Eval> {
        let cfg = self.cfg;
        let mut objective = 0.0;
        let mut mse_sum = 0.0;
        for draw in draws {
            let positions = self.positions(theta, draw);
            let masks = self.masks(theta, draw, mode, straight_through);
            let obstacles: Vec<MaskedObstacle> = positions
                .iter()
                .zip(masks)
                .map(|(p, m)| {
                    Ok(MaskedObstacle::new(
                        Obstacle::new(*p, cfg.radius)?,
                        TemporalMask::new(m)?,
                    ))
                })
                .collect::<Result<_>>()?;
            let decoded = decode_positions(&obstacles, self.goal, self.horizon, &cfg.decoder)?;
            let mse = position_mse(&self.waypoints, &decoded);
            let prior: f64 = positions.iter().map(|p| self.prior.neg_log_density(*p)).sum();
            let overlap = overlap_penalty_points(&positions, cfg.radius, &self.waypoints, cfg.robot_radius);
            objective += mse + cfg.prior_weight * prior + cfg.overlap_weight * overlap;
            mse_sum += mse;
        }
        let k = draws.len() as f64;
        Ok(Eval { objective: objective / k, mse: mse_sum / k })
    }

    /// Sideways offset of initial centres: 1.5 radii, or just beyond the
    /// decoder's inflated radius when that is larger.
    fn initial_offset(&self) -> f64 {
        let r = self.cfg.radius;
        (1.5 * r).max(r + self.cfg.decoder.safety_clearance + 0.15)
    }

    /// Objective and its gradient in parameter units, averaged over `draws`.
    /// Hard masks are differentiated through the soft mask at `tau_end`.
    fn gradient(&self, theta: &[f64], mode: MaskMode, draws: &[Draw]) -> Result<(Eval, Vec<f64>)> {
        let cfg = self.cfg;
        let h = self.horizon;
        let mut grad = vec![0.0; theta.len()];
        let mut objective = 0.0;
        let mut mse_sum = 0.0;
        let inv_h = 1.0 / h as f64;
        for draw in draws {
            let positions = self.positions(theta, draw);
            let masks = self.masks(theta, draw, mode, None);
            let obstacles: Vec<MaskedObstacle> = positions
                .iter()
                .zip(&masks)
                .map(|(p, m)| Ok(MaskedObstacle::new(Obstacle::new(*p, cfg.radius)?, TemporalMask::new(m.clone())?)))
                .collect::<Result<_>>()?;
            let q = decode_positions(&obstacles, self.goal, h, &cfg.decoder)?;
            let mse = position_mse(&self.waypoints, &q);
            let dl_dq: Vec<Vec2> = q.iter().zip(&self.waypoints).map(|(a, b)| (*a - *b) * (2.0 * inv_h)).collect();
            let sens = plan_sensitivity(&q, &obstacles, &cfg.decoder, &dl_dq)?;

            let mut dc = sens.center;
            let mut prior = 0.0;
            for (i, c) in positions.iter().enumerate() {
                prior += self.prior.neg_log_density(*c);
                dc[i] += self.prior.grad(*c) * cfg.prior_weight;
            }
            let overlap = overlap_penalty_points(&positions, cfg.radius, &self.waypoints, cfg.robot_radius);
            overlap_gradient(&positions, cfg.radius, &self.waypoints, cfg.robot_radius, cfg.overlap_weight, &mut dc);
            objective += mse + cfg.prior_weight * prior + cfg.overlap_weight * overlap;
            mse_sum += mse;

            for i in 0..self.n {
                let g = &theta[GEOM * i..GEOM * (i + 1)];
                let e = draw.eps[i];
                let d = dc[i];
                let out = &mut grad[GEOM * i..GEOM * (i + 1)];
                out[0] += d.x;
                out[1] += d.y;
                out[2] += d.x * e[0] * sigmoid(g[2]);
                out[3] += d.y * e[0];
                out[4] += d.y * e[1] * sigmoid(g[4]);
            }
            let tau = match mode {
                MaskMode::Full => continue,
                MaskMode::Soft(tau) => tau,
                MaskMode::Hard => cfg.tau_end,
            };
            let mut soft = vec![0.0; h];
            for i in 0..self.n {
                let alpha = self.alpha(theta, i);
                soft_mask_into(alpha, tau, &draw.gumbel[i], &mut soft);
                let top = argmax(&soft);
                let dm = &sens.mask[i];
                let total: f64 = dm.iter().zip(&soft).map(|(a, b)| a * b).sum();
                let base = self.geom_len() + i * h;
                for t in 0..h {
                    let mut v = dm[t] * soft[t];
                    if t == top {
                        v -= total;
                    }
                    grad[base + t] += v / tau;
                }
            }
        }
        let k = draws.len() as f64;
        grad.iter_mut().for_each(|g| *g /= k);
        Ok((Eval { objective: objective / k, mse: mse_sum / k }, grad))
    }

    /// Starting hypotheses: a draw from the waypoint Gaussian picks the nearest
    /// waypoint, and the centre sits [`Self::initial_offset`] to its side
    /// (alternating) of the local direction of travel.
    fn initial_hypotheses<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<ObstacleHypothesis> {
        (0..self.n)
            .map(|i| {
                let p = self.prior.sample(rng);
                let t = nearest_index(&self.waypoints, p);
                let lo = t.saturating_sub(1);
                let hi = (t + 1).min(self.waypoints.len() - 1);
                let dir = (self.waypoints[hi] - self.waypoints[lo]).normalized().unwrap_or(Vec2::new(1.0, 0.0));
                let side = if i % 2 == 0 { 1.0 } else { -1.0 };
                let normal = Vec2::new(-dir.y, dir.x) * side;
                ObstacleHypothesis {
                    mu: self.waypoints[t] + normal * self.initial_offset(),
                    chol: Chol2::isotropic(self.cfg.initial_sigma),
                    alpha: vec![0.0; self.horizon],
                }
            })
            .collect()
    }
}

fn nearest_index(points: &[Vec2], p: Vec2) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, q) in points.iter().enumerate() {
        let d = (*q - p).norm_sq();
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Which parameter blocks an optimizer run may move.
#[derive(Debug, Clone, Copy)]
struct Blocks {
    geometry: bool,
    logits: bool,
}

/// Black-box descent shared by all phases.
struct Descent<'p, 'a> {
    problem: &'p Problem<'a>,
    scales: Vec<f64>,
    gain: f64,
    /// Multiplier on logit units; follows the temperature while annealing so
    /// steps move `α / τ` by comparable amounts at every stage.
    logit_mult: f64,
}

type Span = std::ops::Range<usize>;

impl<'p, 'a> Descent<'p, 'a> {
    fn new(problem: &'p Problem<'a>) -> Self {
        Self { scales: problem.scales(), gain: problem.cfg.initial_gain, logit_mult: 1.0, problem }
    }

    /// Size of one optimizer unit for parameter `j`.
    fn unit(&self, j: usize) -> f64 {
        if j >= self.problem.geom_len() {
            self.scales[j] * self.logit_mult
        } else {
            self.scales[j]
        }
    }

    fn spans(&self, blocks: Blocks) -> (Option<Span>, Option<Span>) {
        let g = self.problem.geom_len();
        let end = g + self.problem.n * self.problem.horizon;
        (blocks.geometry.then_some(0..g), blocks.logits.then_some(g..end))
    }

    /// Runs `iters` iterations with mask mode `mode(k)`. `theta` ends at the
    /// best parameters found on the reference draws.
    #[allow(clippy::too_many_arguments)]
    fn run<R: Rng + ?Sized>(
        &mut self,
        theta: &mut Vec<f64>,
        iters: usize,
        blocks: Blocks,
        mode: impl Fn(usize) -> MaskMode,
        reference: &[Draw],
        with_gumbel: bool,
        rng: &mut R,
    ) -> Result<PhaseReport> {
        let p = self.problem;
        let cfg = p.cfg;
        let fd_iters = ((iters as f64) * cfg.fd_fraction).ceil() as usize;
        let fd_start = iters - fd_iters.min(iters);

        let first = p.evaluate(theta, mode(0), reference, None)?;
        let mut report = PhaseReport {
            iterations: iters,
            initial_objective: first.objective,
            initial_mse: first.mse,
            ..Default::default()
        };
        let mut current = first;
        let mut current_mode = mode(0);
        let (geom, logits) = self.spans(blocks);

        for k in 0..iters {
            let m = mode(k);
            self.logit_mult = match m {
                MaskMode::Soft(tau) => tau.max(1.0),
                _ => 1.0,
            };
            if m != current_mode {
                current = p.evaluate(theta, m, reference, None)?;
                current_mode = m;
            }
            let draws = p.draws(rng, with_gumbel);
            if cfg.gradient == GradientMethod::Implicit {
                let (_, mut grad) = p.gradient(theta, m, &draws)?;
                for (j, g) in grad.iter_mut().enumerate() {
                    *g *= self.unit(j);
                }
                if geom.is_none() {
                    grad[..p.geom_len()].iter_mut().for_each(|g| *g = 0.0);
                }
                if logits.is_none() {
                    grad[p.geom_len()..].iter_mut().for_each(|g| *g = 0.0);
                }
                self.step(theta, &grad, &geom, &logits, m, reference, &mut current, &mut report)?;
                report.objective_trace.push(current.objective);
                continue;
            }
            let mut grad = vec![0.0; theta.len()];
            let mut spsa: Vec<usize> = Vec::new();
            if logits.is_some() {
                let g = p.geom_len();
                for i in 0..p.n {
                    spsa.extend(p.active_steps(theta, i).map(|t| g + i * p.horizon + t));
                }
            }
            match &geom {
                Some(_) if k >= fd_start => {
                    let i = (k - fd_start) % p.n;
                    self.fd_block(theta, m, &draws, GEOM * i..GEOM * (i + 1), &mut grad)?;
                }
                Some(span) => spsa.extend(span.clone()),
                None => {}
            }
            if !spsa.is_empty() {
                self.spsa(theta, m, &draws, &spsa, &mut grad, rng)?;
            }

            self.step(theta, &grad, &geom, &logits, m, reference, &mut current, &mut report)?;
            report.objective_trace.push(current.objective);
        }
        report.final_objective = current.objective;
        report.final_mse = current.mse;
        report.non_improving = report.final_objective.partial_cmp(&report.initial_objective) != Some(std::cmp::Ordering::Less);
        Ok(report)
    }

    /// Block-normalized step along `-grad` (optimizer units), kept only if it
    /// lowers the objective on the reference draws.
    #[allow(clippy::too_many_arguments)]
    fn step(
        &mut self,
        theta: &mut Vec<f64>,
        grad: &[f64],
        geom: &Option<Span>,
        logits: &Option<Span>,
        mode: MaskMode,
        reference: &[Draw],
        current: &mut Eval,
        report: &mut PhaseReport,
    ) -> Result<()> {
        let mut candidate = theta.clone();
        let mut moved = false;
        for span in geom.iter().chain(logits.iter()) {
            let max = grad[span.clone()].iter().fold(0.0_f64, |a, g| a.max(g.abs()));
            if max > 0.0 && max.is_finite() {
                moved = true;
                for j in span.clone() {
                    candidate[j] -= self.gain * self.unit(j) * grad[j] / max;
                }
            }
        }
        if !moved {
            return Ok(());
        }
        let eval = self.problem.evaluate(&candidate, mode, reference, None)?;
        if eval.objective < current.objective {
            *theta = candidate;
            *current = eval;
            report.accepted_steps += 1;
            self.gain = (self.gain * 1.5).min(8.0);
        } else {
            self.gain = (self.gain * 0.5).max(1e-3);
        }
        Ok(())
    }

    /// SPSA estimate in optimizer units over the coordinates `idx`, written
    /// into `grad`. In hard mode the masks use the straight-through relaxation
    /// around `theta`.
    fn spsa<R: Rng + ?Sized>(
        &self,
        theta: &[f64],
        mode: MaskMode,
        draws: &[Draw],
        idx: &[usize],
        grad: &mut [f64],
        rng: &mut R,
    ) -> Result<()> {
        let c = self.problem.cfg.perturbation;
        let mut plus = theta.to_vec();
        let mut minus = theta.to_vec();
        let mut delta = Vec::with_capacity(idx.len());
        for &j in idx {
            let d = if rng.random::<bool>() { 1.0 } else { -1.0 };
            plus[j] += c * self.unit(j) * d;
            minus[j] -= c * self.unit(j) * d;
            delta.push((j, d));
        }
        let st = (mode == MaskMode::Hard).then_some(theta);
        let lp = self.problem.evaluate(&plus, mode, draws, st)?.objective;
        let lm = self.problem.evaluate(&minus, mode, draws, st)?.objective;
        let diff = (lp - lm) / (2.0 * c);
        for (j, d) in delta {
            grad[j] = diff * d;
        }
        Ok(())
    }

    /// Central differences over one obstacle's geometric parameters.
    fn fd_block(&self, theta: &[f64], mode: MaskMode, draws: &[Draw], span: Span, grad: &mut [f64]) -> Result<()> {
        let p = self.problem;
        let h = p.cfg.fd_step;
        let st = (mode == MaskMode::Hard).then_some(theta);
        let mut probe = theta.to_vec();
        for j in span {
            let step = h * self.scales[j];
            probe[j] = theta[j] + step;
            let lp = p.evaluate(&probe, mode, draws, st)?.objective;
            probe[j] = theta[j] - step;
            let lm = p.evaluate(&probe, mode, draws, st)?.objective;
            probe[j] = theta[j];
            grad[j] = (lp - lm) / (2.0 * h);
        }
        Ok(())
    }
}

/// Phase 1: fit obstacle centre distributions with obstacles present at every timestep.
pub fn fit_phase1<R: Rng + ?Sized>(
    plan: &Plan,
    config: &HallucinationConfig,
    rng: &mut R,
) -> Result<(Vec<ObstacleHypothesis>, PhaseReport)> {
    config.validate()?;
    let problem = Problem::new(plan, config);
    let init = problem.initial_hypotheses(rng);
    let mut theta = problem.pack(&init);
    let reference = problem.draws(rng, false);
    let mut descent = Descent::new(&problem);
    let report = descent.run(
        &mut theta,
        config.phase1_iters,
        Blocks { geometry: true, logits: false },
        |_| MaskMode::Full,
        &reference,
        false,
        rng,
    )?;
    Ok((problem.unpack(&theta), report))
}

/// Phase 2: learn presence logits by annealing Gumbel-Softmax masks from
/// `tau_start` to `tau_end`, then refine with hard one-hot masks.
pub fn fit_phase2<R: Rng + ?Sized>(
    plan: &Plan,
    hyps: &[ObstacleHypothesis],
    config: &HallucinationConfig,
    rng: &mut R,
) -> Result<(Vec<ObstacleHypothesis>, Phase2Report)> {
    config.validate()?;
    let mut cfg = config.clone();
    cfg.n_obstacles = hyps.len();
    let problem = Problem::new(plan, &cfg);
    if hyps.iter().any(|h| h.alpha.len() != problem.horizon) {
        return Err(Error::InvalidInput("hypothesis logits do not match the plan horizon".into()));
    }
    let mut theta = problem.pack(hyps);
    let reference = problem.draws(rng, true);
    let blocks = Blocks { geometry: cfg.refine_geometry_in_phase2, logits: true };
    let mut descent = Descent::new(&problem);

    let anneal_iters = cfg.phase2_anneal_iters;
    let (t0, t1) = (cfg.tau_start, cfg.tau_end);
    let anneal = descent.run(
        &mut theta,
        anneal_iters,
        blocks,
        |k| MaskMode::Soft(tau_schedule(k, anneal_iters, t0, t1)),
        &reference,
        true,
        rng,
    )?;
    let soft_end_mse = problem.evaluate(&theta, MaskMode::Soft(t1), &reference, None)?.mse;

    descent.gain = cfg.initial_gain;
    let hard = descent.run(
        &mut theta,
        cfg.phase2_hard_iters,
        blocks,
        |_| MaskMode::Hard,
        &reference,
        true,
        rng,
    )?;
    let hard_end_mse = hard.final_mse;
    Ok((problem.unpack(&theta), Phase2Report { anneal, hard, soft_end_mse, hard_end_mse }))
}

/// Samples `s1` critical points per hypothesis: position from `N(μ, Σ)` and
/// time at `argmax α`.
pub fn extract_critical_points<R: Rng + ?Sized>(
    hyps: &[ObstacleHypothesis],
    rng: &mut R,
    s1: usize,
) -> Vec<CriticalPoint> {
    let mut out = Vec::with_capacity(hyps.len() * s1);
    for h in hyps {
        let t_crit = h.critical_index() + 1;
        for _ in 0..s1 {
            let p = h.sample_position(rng);
            out.push(CriticalPoint { x: p.x, y: p.y, t_crit });
        }
    }
    out
}

/// Both phases and critical-point extraction for one plan.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Hallucination {
    pub hypotheses: Vec<ObstacleHypothesis>,
    pub candidates: Vec<CriticalPoint>,
    pub phase1: PhaseReport,
    pub phase2: Phase2Report,
}

pub fn hallucinate<R: Rng + ?Sized>(plan: &Plan, config: &HallucinationConfig, rng: &mut R) -> Result<Hallucination> {
    let (hyps, phase1) = fit_phase1(plan, config, rng)?;
    let (hypotheses, phase2) = fit_phase2(plan, &hyps, config, rng)?;
    let candidates = extract_critical_points(&hypotheses, rng, 1);
    Ok(Hallucination { hypotheses, candidates, phase1, phase2 })
}
