//! Order-preserving map helpers over slices.
//!
//! With the `parallel` feature (the default) [`map_collect`] fans work out
//! over rayon and collects results in index order, so outputs are
//! bit-identical to the sequential path regardless of worker count.
//! [`map_collect_seq`] is always available; the criterion bench compares
//! the two.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `items`, preserving index order in the output.
#[cfg(feature = "parallel")]
pub fn map_collect<T: Sync, R: Send, F: Fn(&T) -> R + Sync + Send>(items: &[T], f: F) -> Vec<R> {
    items.par_iter().map(f).collect()
}

/// Map `f` over `items`, preserving index order in the output.
#[cfg(not(feature = "parallel"))]
pub fn map_collect<T, R, F: Fn(&T) -> R>(items: &[T], f: F) -> Vec<R> {
    items.iter().map(f).collect()
}

/// Sequential reference path, kept unconditionally for benchmarks and as
/// the fallback the parallel path must agree with.
pub fn map_collect_seq<T, R, F: Fn(&T) -> R>(items: &[T], f: F) -> Vec<R> {
    items.iter().map(f).collect()
}

/// Same as [`map_collect`] but over an index range.
#[cfg(feature = "parallel")]
pub fn map_range<R: Send, F: Fn(usize) -> R + Sync + Send>(n: usize, f: F) -> Vec<R> {
    (0..n).into_par_iter().map(f).collect()
}

/// Same as [`map_collect`] but over an index range.
#[cfg(not(feature = "parallel"))]
pub fn map_range<R, F: Fn(usize) -> R>(n: usize, f: F) -> Vec<R> {
    (0..n).map(f).collect()
}

/// Sequential index-range map for benchmarks.
pub fn map_range_seq<R, F: Fn(usize) -> R>(n: usize, f: F) -> Vec<R> {
    (0..n).map(f).collect()
}
