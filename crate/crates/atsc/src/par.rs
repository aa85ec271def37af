//! Batch-level parallelism helpers.
//!
//! All data-parallel inner loops (per-sample forwards/backwards, per-channel
//! reductions) go through these helpers. With the `parallel` feature they run
//! on rayon; without it, or when [`set_sequential`] is flipped on, they run
//! sequentially. Both paths produce bitwise-identical results: work is split
//! at fixed chunk boundaries and partial results are combined in index order,
//! so thread scheduling never changes a floating-point sum.

use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Samples folded per partial in chunked reductions. Fixed so the reduction
/// tree is identical across thread counts and feature configurations.
pub const REDUCE_CHUNK: usize = 8;

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Forces the dispatching helpers onto the sequential path at runtime.
/// Used by the benchmark suite and by the parallel-equivalence tests.
pub fn set_sequential(force: bool) {
    FORCE_SEQUENTIAL.store(force, Ordering::SeqCst);
}

/// True when helpers will run sequentially (feature off or override set).
pub fn is_sequential() -> bool {
    cfg!(not(feature = "parallel")) || FORCE_SEQUENTIAL.load(Ordering::SeqCst)
}

/// Applies `f` to consecutive `chunk_len` slices of `out`, one per item.
/// Writes are disjoint, so the parallel path is race-free by construction.
pub fn for_each_chunk_mut<T, F>(out: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    debug_assert!(chunk_len > 0 && out.len() % chunk_len == 0);
    #[cfg(feature = "parallel")]
    if !is_sequential() {
        out.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    for_each_chunk_mut_seq(out, chunk_len, f);
}

/// Sequential twin of [`for_each_chunk_mut`], always available.
pub fn for_each_chunk_mut_seq<T, F>(out: &mut [T], chunk_len: usize, f: F)
where
    F: Fn(usize, &mut [T]),
{
    for (i, c) in out.chunks_mut(chunk_len).enumerate() {
        f(i, c);
    }
}

/// Maps `f` over `0..n`, returning results in index order.
pub fn map_indices<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if !is_sequential() {
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Splits `0..n_items` into [`REDUCE_CHUNK`]-sized ranges, maps each range to
/// a partial with `f`, and folds the partials in range order. The fold order
/// is fixed, so the result is deterministic under any thread count.
pub fn chunked_reduce<R, F, M>(n_items: usize, f: F, merge: M) -> Option<R>
where
    R: Send,
    F: Fn(std::ops::Range<usize>) -> R + Sync + Send,
    M: Fn(R, R) -> R,
{
    if n_items == 0 {
        return None;
    }
    let n_chunks = n_items.div_ceil(REDUCE_CHUNK);
    let partials = map_indices(n_chunks, |ci| {
        let lo = ci * REDUCE_CHUNK;
        let hi = (lo + REDUCE_CHUNK).min(n_items);
        f(lo..hi)
    });
    partials.into_iter().reduce(merge)
}

/// Sum of `f(i)` over `0..n` with the deterministic chunked reduction.
pub fn sum_over<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    chunked_reduce(
        n,
        |range| range.map(&f).sum::<f64>(),
        |a: f64, b: f64| a + b,
    )
    .unwrap_or(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunked_sum_matches_sequential_sum() {
        let data: Vec<f64> = (0..103).map(|i| (i as f64 * 0.37).sin()).collect();
        let par = sum_over(data.len(), |i| data[i]);
        set_sequential(true);
        let seq = sum_over(data.len(), |i| data[i]);
        set_sequential(false);
        // Bitwise equality: identical chunking and fold order on both paths.
        assert_eq!(par.to_bits(), seq.to_bits());
    }

    #[test]
    fn chunk_writes_cover_all_items() {
        let mut out = vec![0.0f64; 24];
        for_each_chunk_mut(&mut out, 4, |i, c| c.iter_mut().for_each(|v| *v = i as f64));
        for (i, v) in out.iter().enumerate() {
            assert_eq!(*v, (i / 4) as f64);
        }
    }
}
