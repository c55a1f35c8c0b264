//! Thin switch between rayon and sequential execution.
//!
//! With the `parallel` feature (default) the helpers fan out over the current
//! rayon pool; without it they compile down to plain loops. Both variants
//! write disjoint output regions and reduce in index order, so results are
//! bitwise identical across feature flags and thread counts.

/// Work smaller than this many output elements is not worth a fork.
#[cfg(feature = "parallel")]
const PAR_MIN_ELEMS: usize = 16 * 1024;

/// Runs `f(i, chunk)` over consecutive `chunk_len` chunks of `out`.
#[cfg(feature = "parallel")]
pub(crate) fn for_each_chunk<T, F>(out: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    use rayon::prelude::*;
    if out.len() >= PAR_MIN_ELEMS {
        out.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, chunk)| f(i, chunk));
    } else {
        for (i, chunk) in out.chunks_mut(chunk_len).enumerate() {
            f(i, chunk);
        }
    }
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn for_each_chunk<T, F>(out: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    for (i, chunk) in out.chunks_mut(chunk_len).enumerate() {
        f(i, chunk);
    }
}

/// Maps `f` over `0..n`, preserving index order in the returned vector.
#[cfg(feature = "parallel")]
pub(crate) fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    (0..n).map(f).collect()
}
