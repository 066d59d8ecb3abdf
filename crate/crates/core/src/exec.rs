//! Switch between rayon-backed and sequential execution of the data-parallel
//! inner loops.
//!
//! Every helper here partitions work by index and returns results in index
//! order, so callers get identical output whichever path runs. Without the
//! `parallel` feature, [`Parallelism::Parallel`] quietly runs sequentially.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Parallelism {
    Sequential,
    #[default]
    Parallel,
}

impl Parallelism {
    /// True when work will actually be spread across the rayon pool.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Parallelism::Parallel
    }
}

/// Size the global rayon pool. Must run before any parallel work; a no-op
/// without the `parallel` feature.
pub fn configure_threads(threads: usize) -> Result<(), String> {
    #[cfg(feature = "parallel")]
    return rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| e.to_string());
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        Ok(())
    }
}

/// Worker threads available to parallel sections.
pub fn current_threads() -> usize {
    #[cfg(feature = "parallel")]
    return rayon::current_num_threads();
    #[cfg(not(feature = "parallel"))]
    1
}

/// Evaluate `f(0..n)` and collect the results in index order.
pub fn map_range<R, F>(n: usize, mode: Parallelism, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode.is_parallel() {
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = mode;
    (0..n).map(f).collect()
}

/// Map over a slice, preserving order.
pub fn map_slice<T, R, F>(items: &[T], mode: Parallelism, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode.is_parallel() {
        return items.par_iter().map(f).collect();
    }
    let _ = mode;
    items.iter().map(f).collect()
}

/// Split `0..n` into fixed-size blocks. The partition depends only on `n` and
/// `block`, never on the thread count.
pub fn blocks(n: usize, block: usize) -> Vec<std::ops::Range<usize>> {
    let block = block.max(1);
    (0..n.div_ceil(block))
        .map(|b| b * block..((b + 1) * block).min(n))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blocks_cover_range() {
        assert_eq!(blocks(0, 4), Vec::<std::ops::Range<usize>>::new());
        assert_eq!(blocks(10, 4), vec![0..4, 4..8, 8..10]);
        assert_eq!(blocks(8, 4), vec![0..4, 4..8]);
    }

    #[test]
    fn both_modes_agree() {
        let a = map_range(1000, Parallelism::Parallel, |i| i * i);
        let b = map_range(1000, Parallelism::Sequential, |i| i * i);
        assert_eq!(a, b);
    }
}
