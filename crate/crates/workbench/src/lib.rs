// SPDX-License-Identifier: MIT OR Apache-2.0

//! # crosstrace
//!
//! Command-line workbench around `crosstrace-core`: TOML run configs,
//! dataset/checkpoint/CSV/SVG formats, a thread-pool executor, wall-clock
//! latency measurement and the `gen-data` .. `inject-eval` pipeline.

pub mod cli;
pub mod config;
pub mod error;
pub mod exec;
pub mod formats;
pub mod latency;
pub mod pipeline;

pub use config::RunConfig;
pub use error::{WbError, WbResult};
