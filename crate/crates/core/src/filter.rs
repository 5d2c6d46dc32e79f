//! Greedy pruning of hallucinated critical points down to the obstacles the
//! plan actually needs.

use serde::{Deserialize, Serialize};

use crate::decoder::{decode_positions, DecoderConfig, MaskedObstacle};
use crate::error::Result;
use crate::geometry::{position_mse, Plan};
use crate::hallucinator::CriticalPoint;

/// Relative loss reduction a candidate must achieve to be kept.
pub const MIN_RELATIVE_REDUCTION: f64 = 0.01;
/// Final loss must be at most this fraction of the straight-line loss.
pub const ACCEPTANCE_RATIO: f64 = 0.10;
pub const DEFAULT_N_MAX: usize = 7;
/// Below this straight-line loss the plan counts as already straight.
pub const OPEN_SPACE_LOSS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub kept: Vec<CriticalPoint>,
    pub baseline_loss: f64,
    pub final_loss: f64,
    /// `(candidate index, relative reduction)` in acceptance order.
    pub per_obstacle_reduction: Vec<(usize, f64)>,
    /// Loss before each kept point was added, then the final loss.
    pub loss_trace: Vec<f64>,
    pub accepted: bool,
    /// The plan is already the straight line; route it to augmentation.
    pub open_space: bool,
}

/// Reconstruction loss of `plan` against the decode of `points` as one-hot obstacles.
pub fn reconstruction_loss(points: &[CriticalPoint], plan: &Plan, radius: f64, decoder: &DecoderConfig) -> Result<f64> {
    let h = plan.horizon();
    let obstacles = points
        .iter()
        .map(|p| p.masked_obstacle(radius, h))
        .collect::<Result<Vec<MaskedObstacle>>>()?;
    let decoded = decode_positions(&obstacles, plan.goal().position(), h, decoder)?;
    Ok(position_mse(&plan.positions(), &decoded))
}

/// Outcome of [`greedy_select`].
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    /// Candidate indices in acceptance order.
    pub kept: Vec<usize>,
    pub per_obstacle_reduction: Vec<(usize, f64)>,
    pub loss_trace: Vec<f64>,
    pub final_loss: f64,
    pub accepted: bool,
}

/// Greedy forward selection over `n` candidates. `loss(set)` scores a subset
/// given as candidate indices. Each round adds the candidate with the lowest
/// loss (lowest index on ties) while it cuts the current loss by at least
/// [`MIN_RELATIVE_REDUCTION`], up to `n_max` picks.
pub fn greedy_select(
    n: usize,
    baseline: f64,
    n_max: usize,
    mut loss: impl FnMut(&[usize]) -> Result<f64>,
) -> Result<Selection> {
    let mut sel = Selection {
        kept: Vec::new(),
        per_obstacle_reduction: Vec::new(),
        loss_trace: vec![baseline],
        final_loss: baseline,
        accepted: false,
    };
    let mut used = vec![false; n];
    let mut current = baseline;
    while sel.kept.len() < n_max && current > 0.0 {
        let mut best: Option<(usize, f64)> = None;
        let mut trial = sel.kept.clone();
        trial.push(0);
        for i in (0..n).filter(|&i| !used[i]) {
            *trial.last_mut().expect("non-empty") = i;
            let l = loss(&trial)?;
            if best.is_none_or(|(_, b)| l < b) {
                best = Some((i, l));
            }
        }
        let Some((i, l)) = best else { break };
        let reduction = (current - l) / current;
        if reduction.is_nan() || reduction < MIN_RELATIVE_REDUCTION {
            break;
        }
        used[i] = true;
        sel.kept.push(i);
        sel.per_obstacle_reduction.push((i, reduction));
        sel.loss_trace.push(l);
        current = l;
    }
    sel.final_loss = current;
    sel.accepted = current <= ACCEPTANCE_RATIO * baseline;
    Ok(sel)
}

pub fn filter_critical_points(
    candidates: &[CriticalPoint],
    plan: &Plan,
    radius: f64,
    decoder: &DecoderConfig,
    n_max: usize,
) -> Result<FilterReport> {
    let baseline_loss = reconstruction_loss(&[], plan, radius, decoder)?;
    if baseline_loss < OPEN_SPACE_LOSS {
        return Ok(FilterReport {
            kept: Vec::new(),
            baseline_loss,
            final_loss: baseline_loss,
            per_obstacle_reduction: Vec::new(),
            loss_trace: vec![baseline_loss],
            accepted: false,
            open_space: true,
        });
    }
    let sel = greedy_select(candidates.len(), baseline_loss, n_max, |idx| {
        let pts: Vec<CriticalPoint> = idx.iter().map(|&i| candidates[i]).collect();
        reconstruction_loss(&pts, plan, radius, decoder)
    })?;
    Ok(FilterReport {
        kept: sel.kept.iter().map(|&i| candidates[i]).collect(),
        baseline_loss,
        final_loss: sel.final_loss,
        per_obstacle_reduction: sel.per_obstacle_reduction,
        loss_trace: sel.loss_trace,
        accepted: sel.accepted,
        open_space: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::{decode, straight_line_plan, TemporalMask};
    use crate::geometry::{Obstacle, Vec2, DEFAULT_DT};

    fn planted_plan(point: CriticalPoint, goal: Vec2, h: usize) -> Plan {
        let ob = point.masked_obstacle(0.5, h).unwrap();
        decode(&[ob], goal, h, DEFAULT_DT, &DecoderConfig::default()).unwrap().plan
    }

    #[test]
    fn straight_plan_is_open_space() {
        let plan = straight_line_plan(Vec2::new(3.0, 0.0), 60, 0.1).unwrap();
        let cands = [CriticalPoint { x: 1.5, y: 0.1, t_crit: 30 }];
        let r = filter_critical_points(&cands, &plan, 0.5, &DecoderConfig::default(), 7).unwrap();
        assert!(r.kept.is_empty());
        assert!(!r.accepted);
        assert!(r.open_space);
    }

    #[test]
    fn keeps_planted_point_and_rejects_decoy() {
        let h = 81;
        let planted = CriticalPoint { x: 1.5, y: 0.15, t_crit: 41 };
        let plan = planted_plan(planted, Vec2::new(3.0, 0.0), h);
        let decoy = CriticalPoint { x: 1.5, y: 8.0, t_crit: 41 };
        let r = filter_critical_points(&[decoy, planted], &plan, 0.5, &DecoderConfig::default(), 7).unwrap();
        assert_eq!(r.kept, vec![planted]);
        assert_eq!(r.per_obstacle_reduction[0].0, 1);
        assert!(r.accepted);
        assert!(r.final_loss < 1e-12);
    }

    #[test]
    fn unused_obstacle_mask_is_irrelevant() {
        let plan = straight_line_plan(Vec2::new(2.0, 0.0), 20, 0.1).unwrap();
        let ob = MaskedObstacle::new(Obstacle::new(Vec2::new(1.0, 0.0), 0.5).unwrap(), TemporalMask::zeros(20));
        let q = decode_positions(&[ob], Vec2::new(2.0, 0.0), 20, &DecoderConfig::default()).unwrap();
        assert_eq!(q, plan.positions());
    }
}
