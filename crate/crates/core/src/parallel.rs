//! Row-wise kernel dispatch.
//!
//! Every dense and sparse kernel in the crate writes its output one row at a
//! time, and each row is a sequential reduction in a fixed index order. Rows are
//! independent, so handing them to rayon changes nothing about the result: the
//! parallel and sequential paths are bitwise identical for any thread count.
//!
//! With the `parallel` feature disabled only the sequential path is compiled.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Below this many output elements the sequential path is used even when
/// `parallel` is enabled; rayon's fork/join overhead dominates small kernels.
pub const PARALLEL_THRESHOLD: usize = 1 << 14;

/// Fill `out` (row-major, `width` columns) by calling `f(row_index, row)`.
pub fn for_each_row<T, F>(out: &mut [T], width: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    #[cfg(feature = "parallel")]
    {
        if out.len() >= PARALLEL_THRESHOLD {
            return for_each_row_par(out, width, f);
        }
    }
    for_each_row_seq(out, width, f)
}

pub fn for_each_row_seq<T, F>(out: &mut [T], width: usize, f: F)
where
    F: Fn(usize, &mut [T]),
{
    if width == 0 {
        return;
    }
    for (i, row) in out.chunks_mut(width).enumerate() {
        f(i, row);
    }
}

#[cfg(feature = "parallel")]
pub fn for_each_row_par<T, F>(out: &mut [T], width: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    if width == 0 {
        return;
    }
    out.par_chunks_mut(width).enumerate().for_each(|(i, row)| f(i, row));
}

/// Map `f` over `0..n` and collect in index order, in parallel when enabled.
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Send + Sync,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Cap the global worker pool. Has no effect without the `parallel` feature or
/// when the pool was already initialised.
pub fn init_thread_pool(threads: Option<usize>) {
    #[cfg(feature = "parallel")]
    if let Some(n) = threads.filter(|&n| n > 0) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = threads;
}

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
