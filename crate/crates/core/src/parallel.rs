//! Per-particle data parallelism with a sequential fallback.
//!
//! Results never depend on the mode or the thread count: every work item
//! derives its own random stream from the seed and its index.

/// How per-particle work is scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExecutionMode {
    Sequential,
    /// Uses the rayon pool when the `parallel` feature is enabled; otherwise
    /// runs sequentially.
    #[default]
    Parallel,
}

/// Maps `f(index, item)` over owned items, preserving order.
pub fn map_indexed<T, R, F>(mode: ExecutionMode, items: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(usize, T) -> R + Sync + Send,
{
    match mode {
        #[cfg(feature = "parallel")]
        ExecutionMode::Parallel => {
            use rayon::prelude::*;
            items.into_par_iter().enumerate().map(|(i, t)| f(i, t)).collect()
        }
        _ => items.into_iter().enumerate().map(|(i, t)| f(i, t)).collect(),
    }
}

/// Runs `f` with at most `threads` workers (0 = library default).
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    {
        if threads > 0 {
            if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
                return pool.install(f);
            }
        }
    }
    let _ = threads;
    f()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree() {
        let items: Vec<u64> = (0..100).collect();
        let seq = map_indexed(ExecutionMode::Sequential, items.clone(), |i, x| x * 3 + i as u64);
        let par = with_threads(4, || map_indexed(ExecutionMode::Parallel, items, |i, x| x * 3 + i as u64));
        assert_eq!(seq, par);
    }
}
