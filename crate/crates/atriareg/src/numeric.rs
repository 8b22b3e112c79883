//! Deterministic reduction helpers.
//!
//! Loss values feed a bit-reproducibility guarantee, so every floating sum
//! that crosses a parallel boundary goes through `pairwise_sum` on a buffer
//! filled in voxel order: the addition tree depends only on the length,
//! never on thread scheduling.

/// Pairwise (cascade) summation in a fixed order.
pub(crate) fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 32 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}
