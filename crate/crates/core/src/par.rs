//! Chunked data-parallel helpers. With the `parallel` feature (default) the
//! work runs on rayon; without it, on a plain sequential loop. Both paths
//! hand each closure an exclusive, contiguous chunk and keep all accumulation
//! inside the chunk sequential, so results are bitwise identical across
//! modes and thread counts.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Split `out` into `chunk_len`-sized pieces and run `f(chunk_index, chunk)`
/// on each. `out.len()` must be a multiple of `chunk_len`.
pub fn for_each_chunk_mut<F>(out: &mut [f64], chunk_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    debug_assert_eq!(out.len() % chunk_len.max(1), 0);
    #[cfg(feature = "parallel")]
    {
        out.par_chunks_mut(chunk_len).enumerate().for_each(|(i, chunk)| f(i, chunk));
    }
    #[cfg(not(feature = "parallel"))]
    {
        for_each_chunk_mut_seq(out, chunk_len, f);
    }
}

/// Sequential twin of [`for_each_chunk_mut`]; always compiled so benchmarks
/// can compare the two under one build.
pub fn for_each_chunk_mut_seq<F>(out: &mut [f64], chunk_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    debug_assert_eq!(out.len() % chunk_len.max(1), 0);
    for (i, chunk) in out.chunks_mut(chunk_len).enumerate() {
        f(i, chunk);
    }
}

/// Ordered parallel map over indices 0..n.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
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
