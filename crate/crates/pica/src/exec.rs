//! Execution policy for data-parallel kernels.
//!
//! Kernels never call rayon directly; they hand disjoint chunks of their
//! output to [`for_each_chunk_mut`] / [`for_each_index`]. With the `parallel`
//! feature those fan out across the rayon pool unless sequential mode is
//! forced at runtime; without it they always loop in order. Each chunk is
//! computed independently and reductions stay sequential, so every mode
//! produces bitwise-identical results.

use std::sync::atomic::{AtomicBool, Ordering};

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Force all kernels onto their sequential path (used by benchmarks to
/// compare modes in one process). Returns the previous setting.
pub fn set_sequential(on: bool) -> bool {
    FORCE_SEQUENTIAL.swap(on, Ordering::SeqCst)
}

/// True when kernels are allowed to run in parallel.
pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.load(Ordering::SeqCst)
}

/// Scoped version of [`set_sequential`]: forces sequential execution until
/// the guard drops (no-op when `on` is false).
pub fn sequential_scope(on: bool) -> SeqGuard {
    SeqGuard { prev: if on { Some(set_sequential(true)) } else { None } }
}

pub struct SeqGuard {
    prev: Option<bool>,
}

impl Drop for SeqGuard {
    fn drop(&mut self) {
        if let Some(prev) = self.prev {
            set_sequential(prev);
        }
    }
}

/// Apply `f` to consecutive chunks of `data` of length `chunk` (the last may
/// be shorter). `f` receives the chunk index and the chunk.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    assert!(chunk > 0, "chunk size must be positive");
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
        return;
    }
    for (i, c) in data.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}

/// Run `f(i)` for every `i in 0..n`, possibly in parallel. `f` must not
/// depend on execution order.
pub fn for_each_index<F>(n: usize, f: F)
where
    F: Fn(usize) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        use rayon::prelude::*;
        (0..n).into_par_iter().for_each(f);
        return;
    }
    for i in 0..n {
        f(i);
    }
}
