//! Column standardization of coefficient sets.

use crate::basis::{CoefSet, ColumnStats};
use crate::error::{Error, Result};

/// Centers every column at its mean and scales it by its sample standard
/// deviation. Constant columns are only centered and record a scale of 1.
pub fn normalize_columns(data: &CoefSet) -> Result<(CoefSet, ColumnStats)> {
    let (n, d) = (data.n(), data.d());
    if n < 2 {
        return Err(Error::TooFewObservations { n, k: 2 });
    }
    let mut means = vec![0.0; d];
    for row in data.rows() {
        for (s, v) in means.iter_mut().zip(row) {
            *s += v;
        }
    }
    means.iter_mut().for_each(|s| *s /= n as f64);
    let mut scales = vec![0.0; d];
    for row in data.rows() {
        for ((s, v), mu) in scales.iter_mut().zip(row).zip(&means) {
            *s += (v - mu).powi(2);
        }
    }
    for s in scales.iter_mut() {
        *s = (*s / (n - 1) as f64).sqrt();
        if *s == 0.0 {
            *s = 1.0;
        }
    }
    let mut values = Vec::with_capacity(n * d);
    for row in data.rows() {
        values.extend(row.iter().zip(&means).zip(&scales).map(|((v, mu), s)| (v - mu) / s));
    }
    let stats = ColumnStats { means, scales };
    let normalized = CoefSet::new(n, d, values)?.with_normalization(Some(stats.clone()));
    Ok((normalized, stats))
}

/// Maps a vector from the normalized scale back to the original one.
pub fn denormalize(v: &[f64], stats: &ColumnStats) -> Vec<f64> {
    v.iter()
        .zip(&stats.means)
        .zip(&stats.scales)
        .map(|((x, mu), s)| x * s + mu)
        .collect()
}
