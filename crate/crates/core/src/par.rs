//! Runtime-switchable data parallelism.
//!
//! The `parallel` feature (default on) pulls in rayon and enables the
//! parallel code paths. The switch is also flippable at runtime so the
//! bench suite can compare both paths in one process.

use std::sync::atomic::{AtomicBool, Ordering};

static PARALLEL: AtomicBool = AtomicBool::new(cfg!(feature = "parallel"));

/// Whether parallel code paths are currently active.
pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && PARALLEL.load(Ordering::Relaxed)
}

/// Toggle parallel execution at runtime. A no-op without the `parallel`
/// feature. Returns the previous value.
pub fn set_parallel(on: bool) -> bool {
    PARALLEL.swap(on, Ordering::Relaxed)
}

/// Run `f(chunk_index, chunk)` over disjoint equal-size chunks of `data`,
/// in parallel when enabled. Chunk boundaries are identical in both modes,
/// so results are bitwise independent of the mode.
pub fn for_each_chunk_mut<F>(data: &mut [f32], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f32]) + Sync + Send,
{
    assert!(chunk > 0);
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    for (i, c) in data.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}

/// Order-preserving map over a slice, parallel when enabled.
pub fn map_collect<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        use rayon::prelude::*;
        return items.par_iter().map(&f).collect();
    }
    items.iter().map(f).collect()
}

/// Order-preserving map over an index range, parallel when enabled.
pub fn map_range<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(&f).collect();
    }
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunked_matches_sequential() {
        let mut a = vec![0.0f32; 64];
        let mut b = vec![0.0f32; 64];
        let prev = set_parallel(true);
        for_each_chunk_mut(&mut a, 8, |i, c| c.iter_mut().for_each(|v| *v = i as f32));
        set_parallel(false);
        for_each_chunk_mut(&mut b, 8, |i, c| c.iter_mut().for_each(|v| *v = i as f32));
        set_parallel(prev);
        assert_eq!(a, b);
    }
}
