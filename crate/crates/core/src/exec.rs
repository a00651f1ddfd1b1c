//! Pluggable per-sample execution.
//!
//! Training processes a mini-batch one sample at a time and sums the
//! per-sample gradients in sample order, so the result is bitwise identical
//! whether the samples were computed sequentially or on a thread pool.

use alloc::vec::Vec;

pub trait SampleMap: Sync {
    /// Evaluates `f(0..n)` and returns the results in index order.
    fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send;
}

/// Runs everything on the calling thread.
#[derive(Debug, Default, Clone, Copy)]
pub struct Sequential;

impl SampleMap for Sequential {
    fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        (0..n).map(f).collect()
    }
}
