//! Central finite-difference verification of autodiff gradients.

use crate::error::Result;
use crate::graph::ModelGraph;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Outcome of comparing analytic gradients against central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error over all checked coordinates.
    pub max_rel_error: f64,
    /// `(tensor index, flat coordinate, analytic, numeric, rel error)` for
    /// every coordinate exceeding the tolerance.
    pub failures: Vec<(usize, usize, f64, f64, f64)>,
    pub coords_checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

fn rel_error(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-6);
    (a - b).abs() / denom
}

/// Compares `analytic` gradients of `loss` w.r.t. `points` against central
/// differences with the given `step`.
///
/// `loss` must be a deterministic pure function of the points: any internal
/// randomness (dropout masks, batch order) has to be fixed across calls.
pub fn finite_difference_check<F>(
    points: &[Tensor],
    analytic: &[Vec<f64>],
    step: f64,
    tolerance: f64,
    mut loss: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    assert_eq!(
        points.len(),
        analytic.len(),
        "one gradient per point tensor"
    );
    let mut work: Vec<Tensor> = points.to_vec();
    let mut max_rel = 0.0f64;
    let mut failures = Vec::new();
    let mut coords = 0;
    for ti in 0..work.len() {
        for ci in 0..work[ti].numel() {
            let orig = work[ti].data()[ci];
            work[ti].data_mut()[ci] = orig + step;
            let up = loss(&work)?;
            work[ti].data_mut()[ci] = orig - step;
            let down = loss(&work)?;
            work[ti].data_mut()[ci] = orig;
            let numeric = (up - down) / (2.0 * step);
            let exact = analytic[ti][ci];
            let rel = rel_error(exact, numeric);
            max_rel = max_rel.max(rel);
            coords += 1;
            if rel > tolerance {
                failures.push((ti, ci, exact, numeric, rel));
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        failures,
        coords_checked: coords,
        tolerance,
    })
}

/// Verifies every trainable parameter of `graph` against central finite
/// differences at `input`, under the smooth surrogate loss
/// `mean(output^2)`.
///
/// The graph must be differentiable at `input`: keep inputs away from ReLU
/// kinks, and note that dropout layers are skipped (inference path) so the
/// loss is a pure function of the parameters.
pub fn check_graph_gradients(
    graph: &ModelGraph,
    input: &Tensor,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let loss_of =
        |g: &ModelGraph| -> Result<(Tape, crate::graph::ForwardPass, crate::tape::TensorId)> {
            let mut tape = Tape::new();
            let pass = g.forward_on_tape::<rand_chacha::ChaCha8Rng>(&mut tape, input, None)?;
            let sq = tape.square(pass.output);
            let loss = tape.mean(sq);
            Ok((tape, pass, loss))
        };
    let (mut tape, pass, loss) = loss_of(graph)?;
    let mut grads = tape.backward(loss)?;
    let names: Vec<String> = pass.bindings.iter().map(|(n, _)| n.clone()).collect();
    let params = graph.trainable_params();
    let by_name: std::collections::HashMap<&str, &Tensor> =
        params.iter().map(|(n, t)| (n.as_str(), *t)).collect();
    let points: Vec<Tensor> = names.iter().map(|n| by_name[n.as_str()].clone()).collect();
    let analytic: Vec<Vec<f64>> = pass
        .bindings
        .iter()
        .zip(&points)
        .map(|((_, id), p)| grads.take(*id).unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();
    finite_difference_check(&points, &analytic, step, tolerance, |p| {
        let mut probe = graph.clone();
        let values: Vec<(String, Tensor)> = names.iter().cloned().zip(p.iter().cloned()).collect();
        probe.load_tensors(&values)?;
        let (tape, _, loss) = loss_of(&probe)?;
        tape.value(loss).item()
    })
}
