//! Pluggable map-over-items execution.
//!
//! Per-subject and per-edge computations are pure, so they can run on any
//! number of workers as long as results are merged in input order. The core
//! crate ships the sequential executor; the CLI crate provides a thread-pool
//! implementation of the same trait. Outputs are bit-identical either way
//! because each item's computation is self-contained.

use alloc::vec::Vec;

pub trait Executor: Sync {
    /// Applies `f` to every item and returns outputs in input order.
    fn map<T, U, F>(&self, items: &[T], f: F) -> Vec<U>
    where
        T: Sync,
        U: Send,
        F: Fn(&T) -> U + Sync;
}

/// Runs everything on the calling thread.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl Executor for Sequential {
    fn map<T, U, F>(&self, items: &[T], f: F) -> Vec<U>
    where
        T: Sync,
        U: Send,
        F: Fn(&T) -> U + Sync,
    {
        items.iter().map(f).collect()
    }
}
