use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::data::{CompositionLabel, World};
use crate::numerics::Tensor;
use crate::vgae;

use super::{evaluate_gczsl, EvalError, ScoreMatrix};

pub const DEFAULT_TAU: f64 = 0.2;

/// `{0.05, 0.10, …, 0.50}`.
pub fn default_tau_grid() -> Vec<f64> {
    (1..=10).map(|i| i as f64 * 0.05).collect()
}

/// Decoded edge probability for every state–object pair, from posterior means.
pub fn feasibility_scores(mu: &Tensor, n_states: usize) -> Result<Tensor, EvalError> {
    Ok(vgae::decode_edges(mu, n_states)?)
}

/// Hard feasibility decisions `p ≥ τ`; seen pairs are always feasible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityMask {
    pub n_states: usize,
    pub n_objects: usize,
    pub tau: f64,
    /// Row-major `|S|×|O|`.
    pub xi: Vec<bool>,
}

impl FeasibilityMask {
    pub fn is_feasible(&self, pair: CompositionLabel) -> bool {
        self.xi[pair.state * self.n_objects + pair.object]
    }

    pub fn n_feasible(&self) -> usize {
        self.xi.iter().filter(|&&f| f).count()
    }
}

pub fn feasibility_mask(probs: &Tensor, tau: f64, seen: &HashSet<CompositionLabel>) -> Result<FeasibilityMask, EvalError> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(EvalError::InvalidTau(tau));
    }
    let (n_states, n_objects) = probs.shape();
    let xi = (0..n_states * n_objects)
        .map(|i| {
            let pair = CompositionLabel::new(i / n_objects, i % n_objects);
            seen.contains(&pair) || probs.data()[i] >= tau
        })
        .collect();
    Ok(FeasibilityMask {
        n_states,
        n_objects,
        tau,
        xi,
    })
}

/// Sets infeasible, non-seen columns to `−∞`.
pub fn apply_feasibility(scores: &ScoreMatrix, mask: &FeasibilityMask) -> Result<ScoreMatrix, EvalError> {
    let masked: Vec<bool> = scores
        .pairs
        .iter()
        .zip(&scores.seen_mask)
        .map(|(&p, &seen)| {
            if p.state >= mask.n_states || p.object >= mask.n_objects {
                return Err(EvalError::Invalid(format!(
                    "pair ({}, {}) outside the {}x{} feasibility mask",
                    p.state, p.object, mask.n_states, mask.n_objects
                )));
            }
            Ok(!seen && !mask.is_feasible(p))
        })
        .collect::<Result<_, _>>()?;
    let mut out = scores.clone();
    for i in 0..out.n_images() {
        for (v, &m) in out.scores.row_mut(i).iter_mut().zip(&masked) {
            if m {
                *v = f64::NEG_INFINITY;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TauCalibration {
    pub tau: f64,
    /// `(tau, validation best harmonic mean)` per grid value, ascending tau.
    pub objective: Vec<(f64, f64)>,
}

/// Maximises open-world validation best-HM over `grid`; ties go to the
/// smaller tau.
pub fn calibrate_tau(
    val_scores: &ScoreMatrix,
    val_labels: &[CompositionLabel],
    edge_probs: &Tensor,
    grid: &[f64],
    n_bias_points: usize,
) -> Result<TauCalibration, EvalError> {
    if grid.is_empty() {
        return Err(EvalError::Empty("tau grid"));
    }
    if val_labels.is_empty() {
        return Err(EvalError::Empty("validation set"));
    }
    let mut sorted = grid.to_vec();
    if let Some(&bad) = sorted.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(EvalError::InvalidTau(bad));
    }
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let seen: HashSet<_> = val_scores
        .pairs
        .iter()
        .zip(&val_scores.seen_mask)
        .filter(|(_, &s)| s)
        .map(|(&p, _)| p)
        .collect();
    let mut objective = Vec::with_capacity(sorted.len());
    let mut best = (f64::NEG_INFINITY, sorted[0]);
    for &tau in &sorted {
        let mask = feasibility_mask(edge_probs, tau, &seen)?;
        let masked = apply_feasibility(val_scores, &mask)?;
        let hm = evaluate_gczsl(&masked, val_labels, n_bias_points, World::OpenWorld)?.best_hm;
        objective.push((tau, hm));
        if hm > best.0 {
            best = (hm, tau);
        }
    }
    Ok(TauCalibration { tau: best.1, objective })
}
