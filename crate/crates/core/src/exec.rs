// SPDX-License-Identifier: MIT OR Apache-2.0

//! Pluggable work distribution.
//!
//! Sweeps and batch gradients are expressed as `map` over an index range and
//! then reduced in index order, so any executor yields bit-identical results.
//! [`Sequential`] lives here; the `crosstrace` crate provides a thread pool.

use alloc::vec::Vec;

/// Evaluates `f(0), f(1), ..., f(n - 1)` and returns the results in index order.
pub trait Executor: Sync {
    fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync;
}

/// Runs every job on the calling thread.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl Executor for Sequential {
    fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync,
    {
        (0..n).map(f).collect()
    }
}
