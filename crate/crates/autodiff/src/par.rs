//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) the helpers dispatch to rayon;
//! without it they run sequential loops with no rayon dependency at all.
//! [`force_sequential`] lets benchmarks compare both paths inside one
//! binary. Callers must only use these helpers for independent work items:
//! results are collected by index, so output never depends on scheduling.

use std::sync::atomic::{AtomicBool, Ordering};

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Globally disable the rayon path (used by benches to measure the
/// sequential fallback without recompiling).
pub fn force_sequential(v: bool) {
    FORCE_SEQUENTIAL.store(v, Ordering::SeqCst);
}

/// True when work will actually be distributed over threads.
pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.load(Ordering::SeqCst)
}

/// Map `0..n` through `f`, collecting results in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if is_parallel() {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(&f).collect();
        }
    }
    (0..n).map(f).collect()
}

/// Run `f` for each index in `0..n`.
pub fn for_each_indexed<F>(n: usize, f: F)
where
    F: Fn(usize) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if is_parallel() {
            use rayon::prelude::*;
            (0..n).into_par_iter().for_each(&f);
            return;
        }
    }
    (0..n).for_each(f);
}

/// Apply `f` to disjoint mutable chunks of `data`, one chunk per index.
/// `chunk_len` must evenly divide `data.len()` into `n` chunks.
pub fn for_each_chunk_mut<F>(data: &mut [f64], chunk_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    assert!(chunk_len > 0 && data.len() % chunk_len == 0);
    #[cfg(feature = "parallel")]
    {
        if is_parallel() {
            use rayon::prelude::*;
            data.par_chunks_mut(chunk_len)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
            return;
        }
    }
    for (i, c) in data.chunks_mut(chunk_len).enumerate() {
        f(i, c);
    }
}
