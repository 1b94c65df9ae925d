//! Response-based knowledge distillation: temperature-softened targets and
//! the combined distillation loss against a frozen teacher.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Mode, ModelGraph};
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

/// Distillation hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KdParams {
    /// Softening temperature, > 0.
    pub tau: f64,
    /// Weight of the distillation term, in [0, 1].
    pub alpha: f64,
}

impl KdParams {
    pub fn new(tau: f64, alpha: f64) -> Result<Self> {
        if tau <= 0.0 {
            return Err(Error::Contract(format!(
                "temperature must be > 0, got {tau}"
            )));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Contract(format!(
                "alpha must lie in [0, 1], got {alpha}"
            )));
        }
        Ok(KdParams { tau, alpha })
    }
}

/// A frozen teacher model: eval mode forced on, parameters never updated.
#[derive(Debug, Clone)]
pub struct TeacherHandle {
    graph: ModelGraph,
}

impl TeacherHandle {
    pub fn new(mut graph: ModelGraph) -> Self {
        graph.set_mode(Mode::Eval);
        TeacherHandle { graph }
    }

    pub fn graph(&self) -> &ModelGraph {
        &self.graph
    }

    /// Teacher logits for a batch; read-only with respect to the teacher.
    pub fn logits(&self, input: &Tensor) -> Result<Tensor> {
        self.graph.forward_infer(input)
    }
}

/// Row-wise `softmax(logits / tau)`, computed with max subtraction.
pub fn soft_targets(logits: &Tensor, tau: f64) -> Result<Tensor> {
    if tau <= 0.0 {
        return Err(Error::Contract(format!(
            "temperature must be > 0, got {tau}"
        )));
    }
    let s = logits.shape();
    if s.len() != 2 {
        return Err(Error::Dim(format!(
            "soft targets expect [batch, classes], got {s:?}"
        )));
    }
    let (batch, classes) = (s[0], s[1]);
    let mut out = vec![0.0; batch * classes];
    for i in 0..batch {
        let row = &logits.data()[i * classes..(i + 1) * classes];
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / tau));
        let mut denom = 0.0;
        for (j, &v) in row.iter().enumerate() {
            let e = (v / tau - max).exp();
            out[i * classes + j] = e;
            denom += e;
        }
        for v in &mut out[i * classes..(i + 1) * classes] {
            *v /= denom;
        }
    }
    Tensor::new(vec![batch, classes], out)
}

/// Encodes labels as one-hot rows, validating the class range.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; labels.len() * classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::Data(format!(
                "label {y} out of range for {classes} classes (sample {i})"
            )));
        }
        out[i * classes + y] = 1.0;
    }
    Ok(out)
}

/// Records the combined distillation loss on `tape`:
///
/// `alpha * tau^2 * CE(soft student, soft teacher) + (1 - alpha) * CE(student, y_true)`
///
/// where `CE(p, q) = -sum_i q_i log p_i` is batch-averaged and the teacher
/// distribution is the target. Teacher logits are constants: gradient flows
/// only through the student terms.
pub fn kd_loss_on_tape(
    tape: &mut Tape,
    student_logits: TensorId,
    teacher_logits: &Tensor,
    labels: &[usize],
    params: KdParams,
) -> Result<TensorId> {
    let s = tape.value(student_logits).shape().to_vec();
    if teacher_logits.shape() != s {
        return Err(Error::Dim(format!(
            "teacher logits {:?} do not match student logits {s:?}",
            teacher_logits.shape()
        )));
    }
    if labels.len() != s[0] {
        return Err(Error::Data(format!(
            "{} labels for a batch of {}",
            labels.len(),
            s[0]
        )));
    }
    let classes = s[1];
    let teacher_soft = soft_targets(teacher_logits, params.tau)?;
    let kd_term = tape.softmax_xent(student_logits, teacher_soft.data().to_vec(), params.tau)?;
    let kd_scaled = tape.scale(kd_term, params.alpha * params.tau * params.tau);
    let hard_term = tape.softmax_xent(student_logits, one_hot(labels, classes)?, 1.0)?;
    let hard_scaled = tape.scale(hard_term, 1.0 - params.alpha);
    tape.add(kd_scaled, hard_scaled)
}

/// Standalone distillation loss value (no surrounding graph).
pub fn kd_loss(
    student_logits: &Tensor,
    teacher_logits: &Tensor,
    labels: &[usize],
    params: KdParams,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let student = tape.leaf(student_logits.clone());
    let loss = kd_loss_on_tape(&mut tape, student, teacher_logits, labels, params)?;
    Ok(tape.value(loss).clone())
}

/// Plain batch-averaged cross-entropy against integer labels.
pub fn cross_entropy_on_tape(
    tape: &mut Tape,
    logits: TensorId,
    labels: &[usize],
) -> Result<TensorId> {
    let s = tape.value(logits).shape().to_vec();
    if labels.len() != s[0] {
        return Err(Error::Data(format!(
            "{} labels for a batch of {}",
            labels.len(),
            s[0]
        )));
    }
    tape.softmax_xent(logits, one_hot(labels, s[1])?, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits(rows: &[&[f64]]) -> Tensor {
        let r = rows.len();
        let c = rows[0].len();
        Tensor::new(vec![r, c], rows.concat()).unwrap()
    }

    #[test]
    fn soft_targets_standard_softmax_at_tau_one() {
        let q = soft_targets(&logits(&[&[2.0, 0.0]]), 1.0).unwrap();
        assert!((q.data()[0] - 0.8808).abs() < 1e-4);
        assert!((q.data()[1] - 0.1192).abs() < 1e-4);
    }

    #[test]
    fn soft_targets_equal_logits_are_uniform() {
        for tau in [0.5, 1.0, 10.0] {
            let q = soft_targets(&logits(&[&[3.3, 3.3, 3.3]]), tau).unwrap();
            for v in q.data() {
                assert!((v - 1.0 / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn soft_targets_high_temperature_flattens() {
        let q = soft_targets(&logits(&[&[5.0, -5.0]]), 1e6).unwrap();
        assert!((q.data()[0] - 0.5).abs() < 1e-5);
        assert!((q.data()[1] - 0.5).abs() < 1e-5);
    }

    #[test]
    fn soft_targets_rows_sum_to_one_and_shift_invariant() {
        let z = logits(&[&[1.0, -2.0, 0.5, 7.0], &[-3.0, -3.5, 4.0, 0.0]]);
        for tau in [0.7, 1.0, 10.0] {
            let q = soft_targets(&z, tau).unwrap();
            for i in 0..2 {
                let sum: f64 = q.data()[i * 4..(i + 1) * 4].iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
            let shifted =
                Tensor::new(vec![2, 4], z.data().iter().map(|v| v + 13.25).collect()).unwrap();
            let qs = soft_targets(&shifted, tau).unwrap();
            for (a, b) in q.data().iter().zip(qs.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn soft_targets_reject_bad_tau() {
        assert!(soft_targets(&logits(&[&[1.0, 2.0]]), 0.0).is_err());
        assert!(soft_targets(&logits(&[&[1.0, 2.0]]), -1.0).is_err());
    }

    #[test]
    fn alpha_zero_is_plain_cross_entropy() {
        let student = logits(&[&[1.5, -0.5, 0.0], &[0.1, 0.2, 0.3]]);
        let teacher = logits(&[&[9.0, 0.0, 0.0], &[0.0, 9.0, 0.0]]);
        let labels = [2usize, 0usize];
        let params = KdParams::new(10.0, 0.0).unwrap();
        let kd = kd_loss(&student, &teacher, &labels, params).unwrap();

        let mut tape = Tape::new();
        let z = tape.leaf(student.clone());
        let ce = cross_entropy_on_tape(&mut tape, z, &labels).unwrap();
        let ce = tape.value(ce).item().unwrap();
        assert!((kd.item().unwrap() - ce).abs() < 1e-12);
    }

    #[test]
    fn matched_logits_at_alpha_one_give_teacher_entropy() {
        // Teacher == student == [2, 0], tau=1, alpha=1: the loss is the
        // entropy of softmax([2, 0]).
        let z = logits(&[&[2.0, 0.0]]);
        let q = soft_targets(&z, 1.0).unwrap();
        let entropy: f64 = -q.data().iter().map(|p| p * p.ln()).sum::<f64>();
        assert!((entropy - 0.365334).abs() < 1e-4, "oracle value {entropy}");

        let params = KdParams::new(1.0, 1.0).unwrap();
        let loss = kd_loss(&z, &z, &[0], params).unwrap();
        assert!((loss.item().unwrap() - entropy).abs() < 1e-12);
    }

    #[test]
    fn kd_term_carries_alpha_tau_squared_multiplier() {
        // alpha=0.1, tau=10: the soft term is scaled by 0.1 * 100 = 10.
        let student = logits(&[&[0.4, -1.0]]);
        let teacher = logits(&[&[2.0, 1.0]]);
        let labels = [0usize];

        let full = kd_loss(
            &student,
            &teacher,
            &labels,
            KdParams::new(10.0, 0.1).unwrap(),
        )
        .unwrap()
        .item()
        .unwrap();
        let hard_only = kd_loss(
            &student,
            &teacher,
            &labels,
            KdParams::new(10.0, 0.0).unwrap(),
        )
        .unwrap()
        .item()
        .unwrap();
        // Recover the raw soft CE term and check the multiplier.
        let soft_t = soft_targets(&teacher, 10.0).unwrap();
        let mut tape = Tape::new();
        let z = tape.leaf(student.clone());
        let raw = tape.softmax_xent(z, soft_t.data().to_vec(), 10.0).unwrap();
        let raw = tape.value(raw).item().unwrap();
        let reconstructed = 0.1 * 100.0 * raw + 0.9 * hard_only;
        assert!((full - reconstructed).abs() < 1e-12);
    }

    #[test]
    fn loss_is_non_negative() {
        let student = logits(&[&[0.3, -2.0, 1.7]]);
        let teacher = logits(&[&[1.0, 1.0, 1.0]]);
        for (tau, alpha) in [(1.0, 0.0), (2.0, 0.5), (10.0, 1.0)] {
            let l = kd_loss(&student, &teacher, &[1], KdParams::new(tau, alpha).unwrap())
                .unwrap()
                .item()
                .unwrap();
            assert!(l >= 0.0);
        }
    }

    #[test]
    fn no_gradient_reaches_teacher_logits() {
        // The teacher enters as a constant; the only gradient-carrying leaf
        // is the student tensor.
        let student = logits(&[&[0.5, 0.1]]);
        let teacher = logits(&[&[3.0, -1.0]]);
        let mut tape = Tape::new();
        let z = tape.leaf(student);
        let teacher_leaf = tape.leaf(teacher.clone());
        let loss = kd_loss_on_tape(
            &mut tape,
            z,
            &teacher,
            &[0],
            KdParams::new(4.0, 0.7).unwrap(),
        )
        .unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(z).is_some());
        assert!(grads.get(teacher_leaf).is_none());
    }

    #[test]
    fn out_of_range_label_is_data_error() {
        let student = logits(&[&[0.5, 0.1]]);
        let teacher = logits(&[&[3.0, -1.0]]);
        let r = kd_loss(&student, &teacher, &[2], KdParams::new(1.0, 0.5).unwrap());
        assert!(matches!(r, Err(Error::Data(_))));
    }

    #[test]
    fn kd_params_validate() {
        assert!(KdParams::new(0.0, 0.5).is_err());
        assert!(KdParams::new(1.0, 1.5).is_err());
        assert!(KdParams::new(10.0, 0.1).is_ok());
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn soft_target_rows_are_distributions_and_shift_invariant(
                row in proptest::collection::vec(-30.0f64..30.0, 2..6),
                tau in 0.1f64..20.0,
                shift in -50.0f64..50.0,
            ) {
                let n = row.len();
                let z = Tensor::new(vec![1, n], row.clone()).unwrap();
                let q = soft_targets(&z, tau).unwrap();
                let sum: f64 = q.data().iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
                prop_assert!(q.data().iter().all(|p| (0.0..=1.0).contains(p)));

                let zs = Tensor::new(vec![1, n], row.iter().map(|v| v + shift).collect()).unwrap();
                let qs = soft_targets(&zs, tau).unwrap();
                for (a, b) in q.data().iter().zip(qs.data()) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }

            #[test]
            fn kd_loss_is_non_negative(
                student in proptest::collection::vec(-10.0f64..10.0, 3),
                teacher in proptest::collection::vec(-10.0f64..10.0, 3),
                tau in 0.5f64..15.0,
                alpha in 0.0f64..=1.0,
                label in 0usize..3,
            ) {
                let s = Tensor::new(vec![1, 3], student).unwrap();
                let t = Tensor::new(vec![1, 3], teacher).unwrap();
                let params = KdParams::new(tau, alpha).unwrap();
                let loss = kd_loss(&s, &t, &[label], params).unwrap().item().unwrap();
                prop_assert!(loss >= 0.0, "loss {loss}");
            }
        }
    }
}
