//! Data-parallel loop helpers.
//!
//! Every hot loop in the crate that is embarrassingly parallel over an outer
//! index (batch element, Monte-Carlo chain, dataset image, ablation variant)
//! goes through this module. With the `parallel` feature the loops are driven
//! by rayon; without it, or when [`set_mode`] selects [`Mode::Sequential`],
//! they run in index order on the calling thread.
//!
//! Work items only ever write disjoint outputs and every reduction happens
//! afterwards in index order, so both modes produce bit-identical results.

use std::sync::atomic::{AtomicU8, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Sequential,
    Parallel,
}

static MODE: AtomicU8 = AtomicU8::new(1);

/// Select the execution mode for subsequent loops (process-wide).
///
/// Selecting [`Mode::Parallel`] is a no-op when the crate is built without the
/// `parallel` feature.
pub fn set_mode(mode: Mode) {
    MODE.store(
        match mode {
            Mode::Sequential => 0,
            Mode::Parallel => 1,
        },
        Ordering::Relaxed,
    );
}

pub fn mode() -> Mode {
    if cfg!(feature = "parallel") && MODE.load(Ordering::Relaxed) == 1 {
        Mode::Parallel
    } else {
        Mode::Sequential
    }
}

/// Run `f(i, chunk)` for every `chunk_len`-sized chunk of `data`.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    assert!(chunk_len > 0, "chunk length must be positive");
    match mode() {
        #[cfg(feature = "parallel")]
        Mode::Parallel => data
            .par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c)),
        _ => data
            .chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c)),
    }
}

/// Like [`for_each_chunk_mut`] over two buffers chunked in lockstep.
pub fn for_each_chunk_pair_mut<A, B, F>(a: &mut [A], a_len: usize, b: &mut [B], b_len: usize, f: F)
where
    A: Send,
    B: Send,
    F: Fn(usize, &mut [A], &mut [B]) + Sync + Send,
{
    assert!(a_len > 0 && b_len > 0, "chunk length must be positive");
    assert_eq!(a.len() / a_len, b.len() / b_len, "chunk counts differ");
    match mode() {
        #[cfg(feature = "parallel")]
        Mode::Parallel => a
            .par_chunks_mut(a_len)
            .zip(b.par_chunks_mut(b_len))
            .enumerate()
            .for_each(|(i, (x, y))| f(i, x, y)),
        _ => a
            .chunks_mut(a_len)
            .zip(b.chunks_mut(b_len))
            .enumerate()
            .for_each(|(i, (x, y))| f(i, x, y)),
    }
}

/// Evaluate `f` on `0..n` and collect the results in index order.
pub fn map_range<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    match mode() {
        #[cfg(feature = "parallel")]
        Mode::Parallel => (0..n).into_par_iter().map(f).collect(),
        _ => (0..n).map(f).collect(),
    }
}

/// Evaluate `f` on every element of `items`, preserving order.
pub fn map_slice<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    match mode() {
        #[cfg(feature = "parallel")]
        Mode::Parallel => items.par_iter().map(f).collect(),
        _ => items.iter().map(f).collect(),
    }
}
