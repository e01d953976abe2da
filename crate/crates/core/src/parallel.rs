//! Conditional data parallelism.
//!
//! With the `parallel` feature (default) the helpers below fan work out on
//! the rayon pool; without it the same closures run sequentially. Every
//! helper preserves element order, so results are identical in both builds:
//! each output element is produced by exactly one closure call and all
//! reductions downstream happen in a fixed order.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Ordered map over `0..n`.
pub(crate) fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
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

/// Ordered map over a slice.
pub(crate) fn map_slice<I, T, F>(items: &[I], f: F) -> Vec<T>
where
    I: Sync,
    T: Send,
    F: Fn(&I) -> T + Sync + Send,
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

/// Applies `f(chunk_index, chunk)` to consecutive chunks of `data`.
///
/// Chunk boundaries depend only on `chunk_len`, never on thread count.
pub(crate) fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    debug_assert!(chunk_len > 0);
    #[cfg(feature = "parallel")]
    {
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, chunk)| f(i, chunk));
    }
    #[cfg(not(feature = "parallel"))]
    {
        for (i, chunk) in data.chunks_mut(chunk_len).enumerate() {
            f(i, chunk);
        }
    }
}
