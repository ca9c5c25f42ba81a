//! Fan-out helpers with a sequential fallback.
//!
//! Every call site is shaped so that the parallel and sequential paths give
//! bit-identical results: closures are pure per item (or operate on private
//! clones) and outputs are collected in input order.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `items`, preserving order.
pub(crate) fn map_collect<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Count indices in `0..n` for which `pred` holds.
pub(crate) fn count_indices<F>(n: usize, pred: F) -> usize
where
    F: Fn(usize) -> bool + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().filter(|&i| pred(i)).count()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).filter(|&i| pred(i)).count()
    }
}

/// Fill each row of `out` (row-major, `cols` wide) from its row index.
/// Each row is produced by exactly one invocation, so per-row arithmetic
/// order is unaffected by threading.
pub(crate) fn fill_rows<F>(out: &mut [f32], cols: usize, f: F)
where
    F: Fn(usize, &mut [f32]) + Sync + Send,
{
    debug_assert!(cols > 0 && out.len() % cols == 0);
    #[cfg(feature = "parallel")]
    {
        out.par_chunks_mut(cols)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
    }
    #[cfg(not(feature = "parallel"))]
    {
        out.chunks_mut(cols).enumerate().for_each(|(i, row)| f(i, row));
    }
}
