//! Small numeric helpers shared by the scoring and analysis code.

/// Linear-interpolated percentile of an ascending-sorted slice at the exact
/// rational rank `num/den * (n - 1)`.
///
/// Using an integer rank avoids float drift in the index for the tertile
/// cutoffs (`1/3`, `2/3`) on large corpora.
pub fn percentile_sorted(sorted: &[f64], num: u64, den: u64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty slice");
    assert!(den > 0 && num <= den);
    let span = (sorted.len() - 1) as u128 * num as u128;
    let idx = (span / den as u128) as usize;
    let rem = (span % den as u128) as f64;
    if rem == 0.0 || idx + 1 >= sorted.len() {
        return sorted[idx];
    }
    let lo = sorted[idx];
    let hi = sorted[idx + 1];
    lo + (hi - lo) * (rem / den as f64)
}

pub fn sorted_copy(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Population standard deviation (divides by n).
pub fn population_std(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64).sqrt()
}

/// Pearson correlation using a single-pass co-moment update.
///
/// Returns `None` when either input has zero variance or the lengths differ.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let (mut mx, mut my) = (0.0, 0.0);
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (i, (&x, &y)) in xs.iter().zip(ys).enumerate() {
        let n = (i + 1) as f64;
        let dx = x - mx;
        let dy = y - my;
        mx += dx / n;
        my += dy / n;
        sxx += dx * (x - mx);
        syy += dy * (y - my);
        sxy += dx * (y - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}
