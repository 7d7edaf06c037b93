//! Data-parallel execution helpers.
//!
//! With the default `parallel` feature the heavy inner loops (matrix
//! products, row-wise kernels, per-document evaluation, ablation sweeps) run
//! on a rayon pool; without it every helper degrades to the equivalent
//! sequential loop. Both paths produce bit-identical results: work is always
//! partitioned over disjoint output ranges and each output element is reduced
//! in a fixed order, so thread count never changes a single bit.
//!
//! The pool is sized from the `GLOCAL_THREADS` environment variable when set
//! (clamped to at least 1), otherwise rayon's default.

#[cfg(feature = "parallel")]
pub use imp::*;

#[cfg(not(feature = "parallel"))]
pub use seq::*;

/// Thread count requested via `GLOCAL_THREADS`, if any.
pub fn requested_threads() -> Option<usize> {
    std::env::var("GLOCAL_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .map(|n| n.max(1))
}

#[cfg(feature = "parallel")]
mod imp {
    use std::sync::OnceLock;

    use rayon::prelude::*;

    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();

    fn pool() -> &'static rayon::ThreadPool {
        POOL.get_or_init(|| {
            let mut builder = rayon::ThreadPoolBuilder::new().thread_name(|i| format!("glocal-{i}"));
            if let Some(n) = super::requested_threads() {
                builder = builder.num_threads(n);
            }
            builder.build().expect("failed to build worker pool")
        })
    }

    pub fn max_threads() -> usize {
        pool().current_num_threads()
    }

    /// Apply `f` to disjoint chunks of `data`, in parallel.
    /// `f` receives the chunk index and the chunk.
    pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
    where
        T: Send,
        F: Fn(usize, &mut [T]) + Sync,
    {
        pool().install(|| {
            data.par_chunks_mut(chunk)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
        });
    }

    /// Parallel map over `0..n`, collected in index order.
    pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        pool().install(|| (0..n).into_par_iter().map(f).collect())
    }
}

#[cfg(not(feature = "parallel"))]
mod seq {
    pub fn max_threads() -> usize {
        1
    }

    pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
    where
        T: Send,
        F: Fn(usize, &mut [T]) + Sync,
    {
        for (i, c) in data.chunks_mut(chunk).enumerate() {
            f(i, c);
        }
    }

    pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        (0..n).map(f).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunked_map_matches_sequential() {
        let mut par = vec![0u64; 1000];
        for_each_chunk_mut(&mut par, 7, |i, c| {
            for (j, x) in c.iter_mut().enumerate() {
                *x = (i * 7 + j) as u64 * 3;
            }
        });
        let seq: Vec<u64> = (0..1000).map(|i| i * 3).collect();
        assert_eq!(par, seq);
    }

    #[test]
    fn map_indexed_preserves_order() {
        let out = map_indexed(100, |i| i * i);
        assert!(out.iter().enumerate().all(|(i, &v)| v == i * i));
    }
}
