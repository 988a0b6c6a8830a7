//! Data-parallel loop helpers with a sequential fallback.
//!
//! Every parallel site in this crate writes disjoint output chunks and keeps the
//! reduction order inside each chunk fixed, so results are bit-identical with and
//! without the `parallel` feature and for any thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Run `f(i, chunk)` over consecutive `chunk`-sized pieces of `data`.
/// Adjacent chunks are grouped so one scheduled task covers a meaningful
/// amount of work (small chunks would otherwise drown in dispatch overhead).
pub(crate) fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    debug_assert!(chunk > 0);
    #[cfg(feature = "parallel")]
    {
        let min_chunks = (1 << 16) / chunk.min(1 << 16);
        data.par_chunks_mut(chunk)
            .enumerate()
            .with_min_len(min_chunks.max(1))
            .for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
}

/// Compute one value per index; result order matches index order.
pub(crate) fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
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
