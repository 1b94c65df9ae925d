//! Smooth-transition schedule: the per-epoch blend weight `lambda_e` and the
//! graph rewrite that moves every activation layer between the ReLU, weighted,
//! and trainable-polynomial states.

use serde::{Deserialize, Serialize};

use crate::activation::{ActivationKind, PolyCoeffs};
use crate::error::{Error, Result};
use crate::graph::{LayerKind, ModelGraph};

/// `(e0, d)`: pure-ReLU warm-up length and transition duration in epochs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionSchedule {
    /// Warm-up epochs with lambda = 0.
    pub start_epoch: u32,
    /// Epochs over which lambda ramps from 0 to 1.
    pub duration: u32,
}

impl TransitionSchedule {
    pub fn new(start_epoch: u32, duration: u32) -> Result<Self> {
        if duration == 0 {
            return Err(Error::Config(
                "transition duration must be >= 1 epoch".into(),
            ));
        }
        Ok(TransitionSchedule {
            start_epoch,
            duration,
        })
    }
}

/// Piecewise blend weight for epoch `e`:
/// 0 while `e - e0 <= 0`, `(e - e0)/d` inside the ramp, 1 afterwards.
pub fn lambda_at_epoch(schedule: TransitionSchedule, epoch: u32) -> f64 {
    let e0 = schedule.start_epoch;
    if epoch <= e0 {
        0.0
    } else if epoch < e0 + schedule.duration {
        f64::from(epoch - e0) / f64::from(schedule.duration)
    } else {
        1.0
    }
}

/// Result of rewriting a graph's activation layers to a new lambda.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionReport {
    pub lambda: f64,
    /// Names of the rewritten activation layers.
    pub updated: Vec<String>,
    /// True when the graph had no eligible activation layers (a no-op).
    pub no_activations: bool,
}

/// Rewrites every ReLU/weighted/trainable-polynomial activation layer to the
/// state implied by `lambda`, in parallel (same lambda everywhere):
///
/// * `lambda = 0` — `Weighted(0)`, which evaluates exactly as ReLU;
/// * `0 < lambda < 1` — `Weighted(lambda)`;
/// * `lambda = 1` — `TrainablePoly` (ReLU branch removed).
///
/// Existing coefficients are preserved; layers still in the plain ReLU state
/// get `new_coeffs()` on first rewrite. Square/approx-ReLU activations are
/// not part of the transition and are left untouched. Pure: returns a new
/// graph.
pub fn apply_transition(
    graph: &ModelGraph,
    lambda: f64,
    mut new_coeffs: impl FnMut() -> PolyCoeffs,
) -> Result<(ModelGraph, TransitionReport)> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Contract(format!(
            "blend weight lambda must lie in [0, 1], got {lambda}"
        )));
    }
    let mut out = graph.clone();
    let mut updated = Vec::new();
    for layer in out.layers_mut() {
        let LayerKind::Activation(kind) = &mut layer.kind else {
            continue;
        };
        let coeffs = match kind {
            ActivationKind::Relu => new_coeffs(),
            ActivationKind::Weighted { coeffs, .. } | ActivationKind::TrainablePoly { coeffs } => {
                coeffs.clone()
            }
            // Square and approx-ReLU layers are outside the ReLU->poly path.
            ActivationKind::Square | ActivationKind::ApproxRelu => continue,
        };
        *kind = if lambda >= 1.0 {
            ActivationKind::TrainablePoly { coeffs }
        } else {
            ActivationKind::Weighted { lambda, coeffs }
        };
        updated.push(layer.name.clone());
    }
    let report = TransitionReport {
        lambda,
        no_activations: updated.is_empty(),
        updated,
    };
    Ok((out, report))
}
