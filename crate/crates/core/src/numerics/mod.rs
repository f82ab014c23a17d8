// SPDX-License-Identifier: MIT OR Apache-2.0

//! Deterministic numeric kernel: dense row-major `f64` matrices, stable
//! nonlinearities and a splittable counter-based random number generator.

mod matrix;
mod ops;
mod rng;

pub use matrix::Matrix;
pub use ops::{gaussian, gelu, gelu_grad, gelu_grad_with, gelu_tanh, l2_norm, layernorm, log_softmax, softmax, softmax_in_place};
pub use rng::Rng;
