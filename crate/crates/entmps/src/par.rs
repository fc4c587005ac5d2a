//! Thin fan-out helpers. With the `parallel` feature (the default) these run
//! on rayon; without it they degrade to plain sequential iteration. Results
//! are collected in input order either way, so numerical output does not
//! depend on the feature or the thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Fixed work-unit size for chunked reductions. Chunk boundaries depend only
/// on this constant and the input length, never on the thread count, so
/// ordered reductions over chunk results are reproducible.
pub const CHUNK: usize = 32;

#[cfg(feature = "parallel")]
pub fn map_collect<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_collect<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}

#[cfg(feature = "parallel")]
pub fn map_collect_mut<T, U, F>(items: &mut [T], f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(&mut T) -> U + Sync + Send,
{
    items.par_iter_mut().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_collect_mut<T, U, F>(items: &mut [T], f: F) -> Vec<U>
where
    F: Fn(&mut T) -> U,
{
    items.iter_mut().map(f).collect()
}

#[cfg(feature = "parallel")]
pub fn for_each_mut_indexed<T, F>(items: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize, &mut T) + Sync + Send,
{
    items.par_iter_mut().enumerate().for_each(|(i, t)| f(i, t));
}

#[cfg(not(feature = "parallel"))]
pub fn for_each_mut_indexed<T, F>(items: &mut [T], f: F)
where
    F: Fn(usize, &mut T),
{
    items.iter_mut().enumerate().for_each(|(i, t)| f(i, t));
}

/// Apply `f` to each fixed-size index chunk of `0..n` and collect the chunk
/// results in order.
#[cfg(feature = "parallel")]
pub fn chunk_map<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(std::ops::Range<usize>) -> U + Sync + Send,
{
    let starts: Vec<usize> = (0..n).step_by(CHUNK).collect();
    starts
        .par_iter()
        .map(|&s| f(s..(s + CHUNK).min(n)))
        .collect()
}

#[cfg(not(feature = "parallel"))]
pub fn chunk_map<U, F>(n: usize, f: F) -> Vec<U>
where
    F: Fn(std::ops::Range<usize>) -> U,
{
    (0..n)
        .step_by(CHUNK)
        .map(|s| f(s..(s + CHUNK).min(n)))
        .collect()
}

/// Cap the global thread pool. `0` keeps the default (all cores). Without
/// the `parallel` feature this is a no-op.
#[cfg(feature = "parallel")]
pub fn limit_threads(n: usize) {
    if n > 0 {
        // ignore the error if a pool was already installed
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

#[cfg(not(feature = "parallel"))]
pub fn limit_threads(_n: usize) {}
