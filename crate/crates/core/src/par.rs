//! Execution backend switch.
//!
//! With the `parallel` feature the indexed maps below fan out over rayon;
//! without it they run on plain iterators. Either way results come back in
//! index order and all reductions happen sequentially at the call site, so
//! the numeric output does not depend on the backend.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[cfg(feature = "parallel")]
pub(crate) fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    F: Fn(usize) -> R,
{
    (0..n).map(f).collect()
}
