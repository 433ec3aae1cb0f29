//! Execution policy for the data-parallel loops (risk rows, per-agent QPs,
//! risk-map cells, batch trials).
//!
//! Every parallel map is order-preserving and every floating-point reduction
//! happens afterwards in index order, so `Parallel` and `Sequential` produce
//! bit-identical results. Without the `parallel` feature, `Parallel` runs
//! sequentially.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Exec {
    Sequential,
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

/// `(0..n).map(f).collect()`, possibly fanned out over the rayon pool.
pub fn map_range<T, F>(exec: Exec, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        _ => (0..n).map(f).collect(),
    }
}

/// Order-preserving map over a slice.
pub fn map_slice<S, T, F>(exec: Exec, items: &[S], f: F) -> Vec<T>
where
    S: Sync,
    T: Send,
    F: Fn(&S) -> T + Sync + Send,
{
    map_range(exec, items.len(), |k| f(&items[k]))
}
