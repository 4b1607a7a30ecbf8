//! Small summary statistics used by the estimators and their checks.

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Unbiased sample variance.
pub fn variance(values: &[f64]) -> f64 {
    let m = mean(values);
    values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() as f64 - 1.0)
}

/// Empirical quantile with linear interpolation between order statistics.
///
/// `sorted` must be ascending and nonempty; `level` is clamped to [0, 1].
pub fn quantile_sorted(sorted: &[f64], level: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = level.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

pub fn quantile(values: &[f64], level: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    quantile_sorted(&sorted, level)
}

/// Standard error of the mean of a correlated series by non-overlapping batch means.
pub fn batch_means_se(series: &[f64], n_batches: usize) -> f64 {
    let size = series.len() / n_batches;
    let means: Vec<f64> = series.chunks_exact(size).take(n_batches).map(mean).collect();
    (variance(&means) / means.len() as f64).sqrt()
}
