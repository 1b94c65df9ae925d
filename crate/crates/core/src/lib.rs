//! Training and static analysis of HE-friendly neural networks.
//!
//! Leveled homomorphic-encryption schemes evaluate only additions and
//! multiplications, so a network destined for encrypted inference cannot
//! contain ReLU or max-pooling. This crate trains such networks on plaintext
//! and audits their graphs:
//!
//! * [`tape`] / [`optim`] — a minimal dense-tensor engine with reverse-mode
//!   autodiff and Adam, enough to train small CNNs deterministically.
//! * [`activation`] — ReLU, square, the fixed quadratic ReLU approximation,
//!   the per-layer trainable polynomial `a*x^2 + b*x`, and the weighted
//!   ReLU/polynomial blend.
//! * [`schedule`] — the per-epoch ramp `lambda_e` that gradually swaps ReLU
//!   for the polynomial across all activation layers.
//! * [`distill`] — response-based knowledge distillation with soft targets.
//! * [`passes`] / [`depth`] — compiler-style graph passes: batch-norm
//!   folding, max-pool to avg-pool substitution, HE finalization,
//!   multiplicative-depth accounting, and HE-friendliness linting.
//! * [`train`] / [`metrics`] / [`data`] — a configuration-driven experiment
//!   harness with seeded sweeps, accuracy/macro-F1 evaluation, and CSV
//!   metrics export.

// Indexed loops over parallel buffers read better in the numeric kernels.
#![allow(clippy::needless_range_loop)]

pub mod activation;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod depth;
pub mod distill;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod optim;
pub mod passes;
pub mod schedule;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
