//! Small numeric helpers: compensated summation and sample statistics.

/// Pairwise (cascade) summation. Error grows as O(log n) rather than O(n),
/// and the result is independent of thread count because it is always
/// evaluated over the slice in order.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const BASE: usize = 128;
    if xs.len() <= BASE {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

pub fn mean(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty());
    pairwise_sum(xs) / xs.len() as f64
}

/// Sample standard deviation (divides by n-1).
pub fn sample_std(xs: &[f64]) -> f64 {
    assert!(xs.len() >= 2);
    let m = mean(xs);
    let ss: f64 = pairwise_sum(&xs.iter().map(|x| (x - m) * (x - m)).collect::<Vec<_>>());
    (ss / (xs.len() - 1) as f64).sqrt()
}

/// Nearest-rank quantile: the smallest value v such that at least
/// ceil(q * n) of the observations are <= v. `q` must lie in (0, 1].
pub fn quantile(xs: &[f64], q: f64) -> f64 {
    assert!(!xs.is_empty());
    assert!(q > 0.0 && q <= 1.0);
    let mut sorted = xs.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Relative error of `a` against `b`, with an absolute floor so that
/// near-zero pairs compare on the scale given by `floor`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
