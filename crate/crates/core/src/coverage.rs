//! Dataset Coverage Score: the fraction of occupied bins over obstacle
//! distance `r`, bearing `theta`, speed `s` and heading `psi`, for every
//! non-empty combination of the four components.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::Scenario;
use crate::geometry::{Plan, Pose2, Vec2};

pub const COMPONENTS: [&str; 4] = ["r", "theta", "s", "psi"];

/// Tolerance for values that land on a bin edge after floating-point division.
const EDGE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub lower: f64,
    pub upper: f64,
    pub resolution: f64,
}

impl Axis {
    pub const fn new(lower: f64, upper: f64, resolution: f64) -> Self {
        Self { lower, upper, resolution }
    }

    /// `ceil((upper - lower) / resolution)`; a partial last bin counts.
    pub fn bins(&self) -> usize {
        let n = (self.upper - self.lower) / self.resolution;
        let k = n.floor();
        if n - k <= EDGE_EPS * n.max(1.0) {
            k.max(1.0) as usize
        } else {
            k as usize + 1
        }
    }

    /// Bin of `v`, or `None` outside `[lower, upper]`. The upper edge belongs to the last bin.
    pub fn bin(&self, v: f64) -> Option<usize> {
        if !(v >= self.lower && v <= self.upper) {
            return None;
        }
        let x = (v - self.lower) / self.resolution;
        let mut k = x.floor();
        if x - k >= 1.0 - EDGE_EPS {
            k += 1.0;
        }
        Some((k as usize).min(self.bins() - 1))
    }

    fn validate(&self, name: &str) -> Result<()> {
        if !(self.lower.is_finite() && self.upper.is_finite() && self.upper > self.lower && self.resolution > 0.0) {
            return Err(Error::Config(format!("coverage axis {name}: need upper > lower and resolution > 0")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoverageConfig {
    pub r: Axis,
    pub theta: Axis,
    pub s: Axis,
    pub psi: Axis,
}

impl Default for CoverageConfig {
    fn default() -> Self {
        Self {
            r: Axis::new(0.15, 2.0, 0.1),
            theta: Axis::new(-180.0, 180.0, 5.0),
            s: Axis::new(1.0, 2.0, 0.1),
            psi: Axis::new(-180.0, 180.0, 5.0),
        }
    }
}

impl CoverageConfig {
    pub fn axes(&self) -> [Axis; 4] {
        [self.r, self.theta, self.s, self.psi]
    }

    pub fn validate(&self) -> Result<()> {
        for (a, name) in self.axes().iter().zip(COMPONENTS) {
            a.validate(name)?;
        }
        Ok(())
    }

    /// Number of joint bins for `subset`.
    pub fn total_bins(&self, subset: Subset) -> usize {
        let axes = self.axes();
        subset.components().map(|c| axes[c].bins()).product()
    }
}

/// Non-empty set of components as a bit mask over `r, theta, s, psi` (bit 0 = r).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Subset(u8);

impl Subset {
    pub const JOINT: Subset = Subset(0b1111);

    pub fn new(mask: u8) -> Option<Self> {
        (mask != 0 && mask < 16).then_some(Subset(mask))
    }

    /// All 15 subsets, ordered by size then component order.
    pub fn all() -> Vec<Subset> {
        let mut v: Vec<Subset> = (1..16).map(Subset).collect();
        v.sort_by_key(|s| (s.0.count_ones(), s.components().collect::<Vec<_>>()));
        v
    }

    pub fn mask(&self) -> u8 {
        self.0
    }

    pub fn components(&self) -> impl Iterator<Item = usize> + '_ {
        (0..4).filter(move |c| self.0 & (1 << c) != 0)
    }

    pub fn contains(&self, other: Subset) -> bool {
        self.0 & other.0 == other.0
    }

    pub fn name(&self) -> String {
        self.components().map(|c| COMPONENTS[c]).collect::<Vec<_>>().join("+")
    }

    pub fn parse(name: &str) -> Option<Self> {
        let mut mask = 0u8;
        for part in name.split('+') {
            let c = COMPONENTS.iter().position(|&n| n == part.trim())?;
            mask |= 1 << c;
        }
        Subset::new(mask)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureSample {
    pub r: f64,
    pub theta: f64,
    pub s: f64,
    pub psi: f64,
}

impl FeatureSample {
    pub fn values(&self) -> [f64; 4] {
        [self.r, self.theta, self.s, self.psi]
    }
}

/// Distance, bearing (deg), speed and heading (deg) of an obstacle in the robot frame.
pub fn features_of(robot: &Pose2, obs_pos: Vec2, obs_vel: Vec2) -> FeatureSample {
    let rel = robot.to_local(obs_pos);
    let s = obs_vel.norm();
    let psi = if s > 0.0 { obs_vel.rotate(-robot.heading()).angle().to_degrees() } else { 0.0 };
    FeatureSample { r: rel.norm(), theta: rel.angle().to_degrees(), s, psi }
}

/// Mixed-radix joint bin of `sample` over `subset` (first component most significant).
pub fn bin_of(sample: &FeatureSample, config: &CoverageConfig, subset: Subset) -> Option<usize> {
    let axes = config.axes();
    let values = sample.values();
    let mut index = 0usize;
    for c in subset.components() {
        let b = axes[c].bin(values[c])?;
        index = index * axes[c].bins() + b;
    }
    Some(index)
}

/// Occupancy for all 15 subsets, filled in one pass over the samples.
#[derive(Debug, Clone, PartialEq)]
pub struct CoverageAccumulator {
    config: CoverageConfig,
    subsets: Vec<Subset>,
    occupied: Vec<Vec<u64>>,
    counts: Vec<usize>,
    samples: usize,
}

impl CoverageAccumulator {
    pub fn new(config: CoverageConfig) -> Result<Self> {
        config.validate()?;
        let subsets = Subset::all();
        let occupied = subsets.iter().map(|s| vec![0u64; config.total_bins(*s).div_ceil(64)]).collect();
        let counts = vec![0; subsets.len()];
        Ok(Self { config, subsets, occupied, counts, samples: 0 })
    }

    pub fn config(&self) -> &CoverageConfig {
        &self.config
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn add(&mut self, sample: &FeatureSample) {
        self.samples += 1;
        for (k, subset) in self.subsets.iter().enumerate() {
            if let Some(i) = bin_of(sample, &self.config, *subset) {
                let (w, b) = (i / 64, 1u64 << (i % 64));
                if self.occupied[k][w] & b == 0 {
                    self.occupied[k][w] |= b;
                    self.counts[k] += 1;
                }
            }
        }
    }

    pub fn extend<'a>(&mut self, samples: impl IntoIterator<Item = &'a FeatureSample>) {
        for s in samples {
            self.add(s);
        }
    }

    /// Union with another accumulator over the same configuration.
    pub fn merge(&mut self, other: &CoverageAccumulator) -> Result<()> {
        if self.config != other.config {
            return Err(Error::InvalidInput("cannot merge coverage over different configurations".into()));
        }
        self.samples += other.samples;
        for k in 0..self.subsets.len() {
            let mut count = 0;
            for (a, b) in self.occupied[k].iter_mut().zip(&other.occupied[k]) {
                *a |= *b;
                count += a.count_ones() as usize;
            }
            self.counts[k] = count;
        }
        Ok(())
    }

    pub fn occupied(&self, subset: Subset) -> usize {
        let k = self.subsets.iter().position(|s| *s == subset).expect("all subsets tracked");
        self.counts[k]
    }

    pub fn dcs(&self, subset: Subset) -> f64 {
        self.occupied(subset) as f64 / self.config.total_bins(subset) as f64
    }

    pub fn report(&self) -> CoverageReport {
        let rows = self
            .subsets
            .iter()
            .map(|s| {
                let occupied = self.occupied(*s);
                let total = self.config.total_bins(*s);
                CoverageRow { subset: s.name(), occupied, total, dcs_percent: 100.0 * occupied as f64 / total as f64 }
            })
            .collect();
        CoverageReport { samples: self.samples, r_bins: self.config.r.bins(), rows }
    }
}

pub fn dcs<'a>(samples: impl IntoIterator<Item = &'a FeatureSample>, config: &CoverageConfig, subset: Subset) -> f64 {
    let total = config.total_bins(subset);
    let mut seen = vec![false; total];
    let mut occupied = 0usize;
    for s in samples {
        if let Some(i) = bin_of(s, config, subset) {
            if !seen[i] {
                seen[i] = true;
                occupied += 1;
            }
        }
    }
    occupied as f64 / total as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub subset: String,
    pub occupied: usize,
    pub total: usize,
    pub dcs_percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub samples: usize,
    /// Bin count used for `r`, stated because the last bin is partial.
    pub r_bins: usize,
    pub rows: Vec<CoverageRow>,
}

impl CoverageReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("subset,occupied,total,dcs_percent\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{:.4}", r.subset, r.occupied, r.total, r.dcs_percent);
        }
        out
    }

    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.subset.len()).max().unwrap_or(6).max(6);
        let mut out = format!(
            "{:<width$}  {:>10}  {:>10}  {:>8}\n",
            "subset", "occupied", "total", "dcs %"
        );
        for r in &self.rows {
            let _ = writeln!(out, "{:<width$}  {:>10}  {:>10}  {:>8.2}", r.subset, r.occupied, r.total, r.dcs_percent);
        }
        let _ = writeln!(out, "samples: {}  r bins: {}", self.samples, self.r_bins);
        out
    }
}

pub fn coverage_report<'a>(
    samples: impl IntoIterator<Item = &'a FeatureSample>,
    config: &CoverageConfig,
) -> Result<CoverageReport> {
    let mut acc = CoverageAccumulator::new(*config)?;
    acc.extend(samples);
    Ok(acc.report())
}

/// One sample per obstacle per timestep, seen from the plan pose at that timestep.
pub fn scenario_features(plan: &Plan, scenario: &Scenario) -> Vec<FeatureSample> {
    let mut out = Vec::new();
    for (j, pose) in plan.poses().iter().enumerate() {
        for traj in scenario.all() {
            out.push(features_of(pose, traj.position(j + 1), traj.velocity));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn feature_examples() {
        let f = features_of(&Pose2::ORIGIN, Vec2::new(1.0, 0.0), Vec2::new(0.0, 1.0));
        assert_eq!((f.r, f.theta, f.s), (1.0, 0.0, 1.0));
        assert!((f.psi - 90.0).abs() < 1e-12);
        let g = features_of(&Pose2::new(0.0, 0.0, FRAC_PI_2), Vec2::new(1.0, 0.0), Vec2::new(0.0, 1.0));
        assert!((g.theta + 90.0).abs() < 1e-12);
        assert!(g.psi.abs() < 1e-12);
        assert_eq!(features_of(&Pose2::ORIGIN, Vec2::new(1.0, 1.0), Vec2::ZERO).psi, 0.0);
    }

    #[test]
    fn bin_examples() {
        let cfg = CoverageConfig::default();
        assert_eq!(cfg.r.bins(), 19);
        assert_eq!(cfg.theta.bins(), 72);
        assert_eq!(cfg.s.bins(), 10);
        let s = |v| FeatureSample { r: 1.0, theta: 0.0, s: v, psi: 0.0 };
        let only_s = Subset::parse("s").unwrap();
        assert_eq!(bin_of(&s(1.0), &cfg, only_s), Some(0));
        assert_eq!(bin_of(&s(2.0), &cfg, only_s), Some(9));
        assert_eq!(bin_of(&s(1.3), &cfg, only_s), Some(3));
        let low_r = FeatureSample { r: 0.10, ..s(1.5) };
        assert_eq!(bin_of(&low_r, &cfg, Subset::parse("r").unwrap()), None);
        assert_eq!(cfg.r.bin(2.0), Some(18));
        assert_eq!(cfg.r.bin(1.96), Some(18));
        assert_eq!(cfg.theta.bin(180.0), Some(71));
    }

    #[test]
    fn subsets_are_named_and_ordered() {
        let all = Subset::all();
        assert_eq!(all.len(), 15);
        assert_eq!(all[0].name(), "r");
        assert_eq!(all[14], Subset::JOINT);
        assert_eq!(Subset::parse("theta+psi").unwrap().name(), "theta+psi");
        assert_eq!(CoverageConfig::default().total_bins(Subset::JOINT), 19 * 72 * 10 * 72);
    }

    #[test]
    fn empty_and_single() {
        let cfg = CoverageConfig::default();
        assert_eq!(dcs(&[], &cfg, Subset::JOINT), 0.0);
        let one = [FeatureSample { r: 1.0, theta: 10.0, s: 1.5, psi: -20.0 }];
        assert_eq!(dcs(&one, &cfg, Subset::JOINT), 1.0 / cfg.total_bins(Subset::JOINT) as f64);
        let acc_report = coverage_report(&one, &cfg).unwrap();
        assert!(acc_report.rows.iter().all(|r| r.occupied == 1));
    }

    #[test]
    fn merge_is_union() {
        let cfg = CoverageConfig::default();
        let a = [FeatureSample { r: 1.0, theta: 10.0, s: 1.5, psi: -20.0 }];
        let b = [FeatureSample { r: 0.5, theta: 10.0, s: 1.5, psi: 40.0 }];
        let mut x = CoverageAccumulator::new(cfg).unwrap();
        x.extend(&a);
        let mut y = CoverageAccumulator::new(cfg).unwrap();
        y.extend(&b);
        x.merge(&y).unwrap();
        let mut z = CoverageAccumulator::new(cfg).unwrap();
        z.extend(a.iter().chain(&b));
        assert_eq!(x.report(), z.report());
    }
}
