//! Execution strategy for data-parallel loops.
//!
//! Every parallel loop in the crate is written against [`Execution`]. Work is
//! always split the same way and results are collected in input order, so a
//! sequential run and a parallel run produce identical output.

/// How a data-parallel loop is driven.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    /// Plain iterator on the calling thread.
    Sequential,
    /// Rayon work-stealing pool. Falls back to [`Execution::Sequential`]
    /// when the crate is built without the `parallel` feature.
    #[default]
    Parallel,
}

impl Execution {
    /// `true` when loops will actually run on the rayon pool.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }

    /// Maps `f` over `items`, preserving order.
    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            use rayon::prelude::*;
            return items.par_iter().map(f).collect();
        }
        items.iter().map(f).collect()
    }

    /// Maps `f` over `0..n`, preserving order.
    pub fn map_range<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }

    /// Runs `f` inside a pool capped at `threads` workers. Sequential
    /// execution simply calls `f`.
    pub fn with_pool<R, F>(self, threads: usize, f: F) -> R
    where
        R: Send,
        F: FnOnce() -> R + Send,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            match rayon::ThreadPoolBuilder::new()
                .num_threads(threads.max(1))
                .build()
            {
                Ok(pool) => return pool.install(f),
                Err(err) => log::warn!("could not build worker pool, running inline: {err}"),
            }
        }
        let _ = threads;
        f()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sequential_and_parallel_agree() {
        let items: Vec<u64> = (0..1000).collect();
        let seq = Execution::Sequential.map(&items, |x| x * x + 1);
        let par = Execution::Parallel.map(&items, |x| x * x + 1);
        assert_eq!(seq, par);
        assert_eq!(
            Execution::Sequential.map_range(50, |i| i * 3),
            Execution::Parallel.map_range(50, |i| i * 3)
        );
    }

    #[test]
    fn pool_runs_closure() {
        let out = Execution::Parallel.with_pool(2, || Execution::Parallel.map_range(10, |i| i));
        assert_eq!(out, (0..10).collect::<Vec<_>>());
    }
}
