//! Data-parallel batch dispatch with a sequential fallback.
//!
//! Outputs are collected in sample order and reduced sequentially by the
//! caller, so the parallel and sequential paths produce bitwise-identical
//! results.

/// Execution strategy for per-sample work inside a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parallelism {
    /// Process samples one at a time on the calling thread.
    Sequential,
    /// Fan out over the rayon thread pool (requires the `parallel` feature;
    /// degrades to sequential otherwise).
    Rayon,
}

impl Default for Parallelism {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Parallelism::Rayon
        } else {
            Parallelism::Sequential
        }
    }
}

/// Maps `f` over `items`, preserving order.
pub fn batch_map<T, R, F>(par: Parallelism, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    match par {
        Parallelism::Sequential => items.iter().enumerate().map(|(i, t)| f(i, t)).collect(),
        Parallelism::Rayon => {
            #[cfg(feature = "parallel")]
            {
                use rayon::prelude::*;
                items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect()
            }
            #[cfg(not(feature = "parallel"))]
            {
                items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
            }
        }
    }
}
