// SPDX-License-Identifier: MIT OR Apache-2.0

//! # crosstrace-core
//!
//! A small, fully instrumented multimodal decoder together with the
//! machinery to interrogate it:
//!
//! - [`model`]: patch-embedded grid images and text tokens share one causal
//!   residual stream, `h(l) = h(l-1) + a(l) + m(l)`, with hook points on the
//!   attention output, the FFN output and the hidden state of every layer.
//! - [`synth`]: synthetic object-presence QA and captioning tasks with the
//!   seven-way token categorisation used for tracing.
//! - [`train`]: analytic backpropagation, finite-difference checking and Adam.
//! - [`trace`]: clean / corrupted / patched triplet runs, recovery rates and
//!   component x layer x category sweeps.
//! - [`inject`]: recovery-rate weighted, causally gated injection of
//!   last-token attention/FFN outputs into deeper layers during decoding.
//! - [`eval`]: binary QA metrics and caption hallucination ratios.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, the command
//! line and wall-clock measurements live in the `crosstrace` crate.

#![no_std]
#![warn(missing_debug_implementations, rust_2018_idioms)]
// `!(x > 0.0)` style checks deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod error;
pub mod eval;
pub mod exec;
pub mod inject;
pub mod model;
pub mod numerics;
pub mod synth;
pub mod trace;
pub mod train;

pub use error::{Error, Result};
