//! Activation functions: ReLU, square, the fixed quadratic ReLU
//! approximation, the per-layer trainable polynomial `a*x^2 + b*x`, and the
//! lambda-weighted ReLU/polynomial blend used during the transition phase.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{APPROX_RELU_A, APPROX_RELU_B};
use crate::tensor::Tensor;

/// Trainable coefficient pair of one activation layer, shared across all
/// channels of that layer. Both carry gradient slots and are part of the
/// optimizer parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyCoeffs {
    a: Tensor,
    b: Tensor,
}

impl PolyCoeffs {
    pub fn new(a: f64, b: f64) -> Self {
        PolyCoeffs {
            a: Tensor::scalar(a),
            b: Tensor::scalar(b),
        }
    }

    /// The default initialization `a=0, b=1`: the polynomial starts out as
    /// the identity, which agrees with ReLU on positive inputs.
    pub fn identity_init() -> Self {
        PolyCoeffs::new(0.0, 1.0)
    }

    pub fn a(&self) -> f64 {
        self.a.data()[0]
    }

    pub fn b(&self) -> f64 {
        self.b.data()[0]
    }

    pub fn a_tensor(&self) -> &Tensor {
        &self.a
    }

    pub fn b_tensor(&self) -> &Tensor {
        &self.b
    }

    pub fn a_tensor_mut(&mut self) -> &mut Tensor {
        &mut self.a
    }

    pub fn b_tensor_mut(&mut self) -> &mut Tensor {
        &mut self.b
    }

    /// Disjoint mutable access to both coefficient tensors.
    pub fn tensors_mut(&mut self) -> (&mut Tensor, &mut Tensor) {
        (&mut self.a, &mut self.b)
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.a() * x * x + self.b() * x
    }
}

#[derive(Serialize, Deserialize)]
struct PolyCoeffsRepr {
    a: f64,
    b: f64,
}

impl Serialize for PolyCoeffs {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        PolyCoeffsRepr {
            a: self.a(),
            b: self.b(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for PolyCoeffs {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = PolyCoeffsRepr::deserialize(d)?;
        Ok(PolyCoeffs::new(r.a, r.b))
    }
}

/// The activation of one activation layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "fn", rename_all = "snake_case")]
pub enum ActivationKind {
    Relu,
    Square,
    ApproxRelu,
    TrainablePoly {
        coeffs: PolyCoeffs,
    },
    /// `(1-lambda)*ReLU(x) + lambda*poly(x)`. `lambda` is scheduler state,
    /// never a trainable parameter.
    Weighted {
        lambda: f64,
        coeffs: PolyCoeffs,
    },
}

impl ActivationKind {
    pub fn name(&self) -> &'static str {
        match self {
            ActivationKind::Relu => "relu",
            ActivationKind::Square => "square",
            ActivationKind::ApproxRelu => "approx_relu",
            ActivationKind::TrainablePoly { .. } => "trainable_poly",
            ActivationKind::Weighted { .. } => "weighted",
        }
    }

    pub fn coeffs(&self) -> Option<&PolyCoeffs> {
        match self {
            ActivationKind::TrainablePoly { coeffs } | ActivationKind::Weighted { coeffs, .. } => {
                Some(coeffs)
            }
            _ => None,
        }
    }

    /// Scalar evaluation, identical in arithmetic to the tape ops.
    pub fn eval_scalar(&self, x: f64) -> f64 {
        match self {
            ActivationKind::Relu => relu_scalar(x),
            ActivationKind::Square => x * x,
            ActivationKind::ApproxRelu => APPROX_RELU_A * x * x + APPROX_RELU_B * x,
            ActivationKind::TrainablePoly { coeffs } => coeffs.eval(x),
            ActivationKind::Weighted { lambda, coeffs } => {
                (1.0 - lambda) * relu_scalar(x) + lambda * coeffs.eval(x)
            }
        }
    }
}

fn relu_scalar(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Elementwise `max(0, x)`.
pub fn relu(x: &Tensor) -> Tensor {
    map(x, relu_scalar)
}

/// Elementwise `x^2`.
pub fn square(x: &Tensor) -> Tensor {
    map(x, |v| v * v)
}

/// Elementwise `0.00047x^2 + 0.5x`; the coefficients are fixed.
pub fn approx_relu(x: &Tensor) -> Tensor {
    map(x, |v| APPROX_RELU_A * v * v + APPROX_RELU_B * v)
}

/// Elementwise `a*x^2 + b*x`.
pub fn trainable_poly(x: &Tensor, coeffs: &PolyCoeffs) -> Tensor {
    let (a, b) = (coeffs.a(), coeffs.b());
    map(x, |v| a * v * v + b * v)
}

/// Elementwise `(1-lambda)*relu(x) + lambda*(a*x^2 + b*x)`.
pub fn weighted_act(x: &Tensor, lambda: f64, coeffs: &PolyCoeffs) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Contract(format!(
            "blend weight lambda must lie in [0, 1], got {lambda}"
        )));
    }
    let (a, b) = (coeffs.a(), coeffs.b());
    Ok(map(x, |v| {
        (1.0 - lambda) * relu_scalar(v) + lambda * (a * v * v + b * v)
    }))
}

fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
        .expect("shape preserved")
}
