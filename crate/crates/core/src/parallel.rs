//! Block-parallel helpers.
//!
//! Work is always cut into blocks of a fixed size that does not depend on the
//! number of worker threads, and every block is computed by the same code in
//! both execution paths. Results are therefore bit-identical whether the
//! blocks run on the rayon pool or in the sequential fallback (built without
//! the `parallel` feature, or when the current pool has a single thread).

use ndarray::{ArrayViewMut2, Axis};

/// Number of output units per block in the dense kernels.
pub const UNIT_BLOCK: usize = 128;

/// Returns true when block work will be dispatched to rayon.
pub fn is_parallel() -> bool {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads() > 1
    }
    #[cfg(not(feature = "parallel"))]
    {
        false
    }
}

/// Number of worker threads block work is spread over.
pub fn current_threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

/// Calls `f(offset, block)` for consecutive blocks of `out` along `axis`.
pub fn for_each_block<F>(mut out: ArrayViewMut2<'_, f64>, axis: Axis, block: usize, f: F)
where
    F: Fn(usize, ArrayViewMut2<'_, f64>) + Sync + Send,
{
    assert!(block > 0);
    #[cfg(feature = "parallel")]
    if is_parallel() {
        use ndarray::parallel::prelude::*;
        out.axis_chunks_iter_mut(axis, block)
            .into_par_iter()
            .enumerate()
            .for_each(|(i, chunk)| f(i * block, chunk));
        return;
    }
    for (i, chunk) in out.axis_chunks_iter_mut(axis, block).enumerate() {
        f(i * block, chunk);
    }
}

/// Maps `f` over `0..n` and returns the results in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Runs `f` on a pool capped at `threads` workers. With the `parallel`
/// feature disabled this simply calls `f`.
pub fn with_threads<T, F>(threads: usize, f: F) -> T
where
    T: Send,
    F: FnOnce() -> T + Send,
{
    #[cfg(feature = "parallel")]
    {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build()
            .expect("failed to build thread pool");
        pool.install(f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        f()
    }
}
