//! Data-parallel helpers with a sequential fallback.
//!
//! Outputs are collected in index order and reductions fold fixed chunks in
//! ascending order, so the `parallel` feature changes wall time only; results
//! are bit-identical with and without it.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Chunk size for point-dimension splits. Fixed so the reduction order (and
/// therefore every floating-point sum) is independent of thread scheduling.
pub const POINT_CHUNK: usize = 512;

/// `(0..n).map(f)` collected in order, parallel when enabled.
#[cfg(feature = "parallel")]
pub fn map_indexed<T: Send, F: Fn(usize) -> T + Sync + Send>(n: usize, f: F) -> Vec<T> {
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, F: Fn(usize) -> T>(n: usize, f: F) -> Vec<T> {
    (0..n).map(f).collect()
}

/// Splits `out` into fixed chunks of `chunk` elements and applies
/// `f(start, chunk_slice)` to each; chunks are disjoint so writes race-free.
#[cfg(feature = "parallel")]
pub fn for_each_chunk_mut<T: Send, F: Fn(usize, &mut [T]) + Sync + Send>(
    out: &mut [T],
    chunk: usize,
    f: F,
) {
    out.par_chunks_mut(chunk)
        .enumerate()
        .for_each(|(c, slice)| f(c * chunk, slice));
}

#[cfg(not(feature = "parallel"))]
pub fn for_each_chunk_mut<T, F: Fn(usize, &mut [T])>(out: &mut [T], chunk: usize, f: F) {
    for (c, slice) in out.chunks_mut(chunk).enumerate() {
        f(c * chunk, slice);
    }
}

/// Fixed chunking of `0..n`: the ranges every chunked reduction folds over.
pub fn chunk_ranges(n: usize, chunk: usize) -> Vec<std::ops::Range<usize>> {
    let mut out = Vec::with_capacity(n.div_ceil(chunk));
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        out.push(start..end);
        start = end;
    }
    out
}
