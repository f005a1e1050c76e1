//! Order-preserving data-parallel map with a sequential fallback.
//!
//! Without the `parallel` feature, [`Parallelism::Rayon`] runs sequentially.
//! Both paths return results in index order, and callers reduce them in that
//! order, so outputs are bit-identical either way.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parallelism {
    #[default]
    Sequential,
    Rayon,
}

impl Parallelism {
    /// `Rayon` when more than one worker is requested.
    pub fn from_threads(threads: usize) -> Self {
        if threads > 1 {
            Parallelism::Rayon
        } else {
            Parallelism::Sequential
        }
    }

    pub fn map<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match self {
            Parallelism::Sequential => (0..n).map(f).collect(),
            #[cfg(feature = "parallel")]
            Parallelism::Rayon => {
                use rayon::prelude::*;
                (0..n).into_par_iter().map(f).collect()
            }
            #[cfg(not(feature = "parallel"))]
            Parallelism::Rayon => (0..n).map(f).collect(),
        }
    }
}

/// Sizes the global worker pool. Only the first call has an effect.
pub fn init_threads(threads: usize) -> bool {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new().num_threads(threads.max(1)).build_global().is_ok()
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        false
    }
}
