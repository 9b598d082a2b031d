//! Index-ordered parallel evaluation.
//!
//! Per-sample work may run on any number of threads, but results are always
//! collected by index and reduced sequentially, so sums are bit-identical
//! regardless of the worker count.

use rayon::prelude::*;

/// Below this many items the work runs on the calling thread.
const PARALLEL_THRESHOLD: usize = 512;

pub fn ordered_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    if n < PARALLEL_THRESHOLD {
        (0..n).map(f).collect()
    } else {
        (0..n).into_par_iter().map(f).collect()
    }
}
