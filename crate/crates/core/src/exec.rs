//! Batch execution: data-parallel with rayon, or sequential.
//!
//! Both paths return results in input order; callers reduce sequentially so
//! floating-point sums are identical for any thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Environment variable bounding the worker count.
pub const THREADS_ENV: &str = "RDPO_LAB_THREADS";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    /// Falls back to sequential when built without the `parallel` feature.
    #[default]
    Parallel,
}

impl Exec {
    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => items.par_iter().map(f).collect(),
            _ => items.iter().map(f).collect(),
        }
    }

    pub fn map_range<R, F>(self, range: std::ops::Range<usize>, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => range.into_par_iter().map(f).collect(),
            _ => range.map(f).collect(),
        }
    }
}

/// Reads [`THREADS_ENV`] and sizes the global rayon pool accordingly.
///
/// Returns the configured count, or `None` when the variable is unset. Calling
/// this after the global pool has been built is harmless; the first size wins.
pub fn init_threads_from_env() -> crate::Result<Option<usize>> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(None);
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| crate::Error::Config(format!("{THREADS_ENV} must be a positive integer, got {raw:?}")))?;
    #[cfg(feature = "parallel")]
    {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(Some(n))
}
