//! Choosing the number of clusters: penalty shapes, data-driven slope
//! estimation, and the penalized selection rule.
//!
//! A trace holds, for each candidate `k`, the per-observation log-likelihood
//! `l_n / n` of the best fitted model and its penalty `pen(k)`. For large
//! models the log-likelihood grows linearly in the penalty; the slope of that
//! growth is `kappa`, and the selected `k` minimizes
//! `-l_n / n + 2 kappa pen(k)`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `pen(k) = d k`: free parameters of the equal-weight spherical mixture.
pub fn penalty_spherical(k: usize, d: usize) -> f64 {
    (d * k) as f64
}

/// `pen(k) = (d^2/2 + 3d/2 + 1) k - 1`: free parameters of the
/// full-covariance mixture.
pub fn penalty_gmm_full(k: usize, d: usize) -> f64 {
    let d = d as f64;
    (d * d / 2.0 + 1.5 * d + 1.0) * k as f64 - 1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Penalty {
    Spherical,
    Full,
}

impl Penalty {
    pub fn value(self, k: usize, d: usize) -> f64 {
        match self {
            Penalty::Spherical => penalty_spherical(k, d),
            Penalty::Full => penalty_gmm_full(k, d),
        }
    }
}

/// One candidate `k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub k: usize,
    /// Per-observation log-likelihood `l_n / n` of the best model with `k`
    /// clusters.
    pub loglik: f64,
    pub pen: f64,
    /// Wall time spent fitting this `k`; informational only.
    pub seconds: f64,
}

/// Records ordered by strictly increasing `k`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SelectionTrace {
    records: Vec<SelectionRecord>,
}

impl SelectionTrace {
    pub fn new(records: Vec<SelectionRecord>) -> Result<Self> {
        let mut trace = Self::default();
        for r in records {
            trace.push(r)?;
        }
        Ok(trace)
    }

    pub fn push(&mut self, record: SelectionRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if record.k <= last.k {
                return Err(Error::InvalidConfig(format!(
                    "trace k values must increase ({} after {})",
                    record.k, last.k
                )));
            }
        }
        if !(record.loglik.is_finite() && record.pen.is_finite()) {
            return Err(Error::NonFinite("selection trace"));
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[SelectionRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn ks(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.k).collect()
    }

    /// Same records with `pen` recomputed from `penalty` and dimension `d`.
    pub fn with_penalty(&self, penalty: Penalty, d: usize) -> Self {
        Self {
            records: self
                .records
                .iter()
                .map(|r| SelectionRecord {
                    pen: penalty.value(r.k, d),
                    ..*r
                })
                .collect(),
        }
    }

    /// CSV with header `k,loglik,pen,seconds`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for r in &self.records {
            w.serialize(r)?;
        }
        if self.records.is_empty() {
            w.write_record(["k", "loglik", "pen", "seconds"])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let headers = r.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["k", "loglik", "pen", "seconds"] {
            return Err(Error::InvalidConfig(format!(
                "trace header must be k,loglik,pen,seconds (got {})",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let records = r
            .deserialize()
            .collect::<std::result::Result<Vec<SelectionRecord>, _>>()?;
        Self::new(records)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_csv(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Least-squares slope of the log-likelihood against the penalty over one
/// window of the largest models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WindowSlope {
    pub first_k: usize,
    pub last_k: usize,
    pub slope: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlopeEstimate {
    pub kappa: f64,
    /// `(first k, last k)` of the window the slope came from.
    pub window: (usize, usize),
    /// Every window considered, shortest first.
    pub diagnostics: Vec<WindowSlope>,
}

/// Smallest window (in candidates) a slope is fitted on.
pub const MIN_WINDOW: usize = 4;
/// Consecutive windows are stable when their slopes differ by less than this
/// fraction.
pub const STABILITY: f64 = 0.05;

fn ols_slope(points: &[SelectionRecord]) -> f64 {
    let n = points.len() as f64;
    let x_mean = points.iter().map(|r| r.pen).sum::<f64>() / n;
    let y_mean = points.iter().map(|r| r.loglik).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|r| (r.pen - x_mean).powi(2)).sum();
    let sxy: f64 = points
        .iter()
        .map(|r| (r.pen - x_mean) * (r.loglik - y_mean))
        .sum();
    if sxx == 0.0 {
        f64::NAN
    } else {
        sxy / sxx
    }
}

/// Data-driven slope estimation.
///
/// Windows all end at the largest model and start within the largest-penalty
/// half of the candidates (at least [`MIN_WINDOW`] long). Their slopes are
/// listed from the shortest window to the longest; the longest run of
/// consecutive windows whose slopes change by less than [`STABILITY`] is
/// located (ties go to the run reaching longer windows), and the slope of the
/// longest window in that run is returned.
pub fn estimate_slope_ddse(trace: &SelectionTrace) -> Result<SlopeEstimate> {
    let records = trace.records();
    let count = records.len();
    if count < MIN_WINDOW {
        return Err(Error::TooFewCandidates {
            needed: MIN_WINDOW,
            got: count,
        });
    }
    let longest = count.div_ceil(2).max(MIN_WINDOW);
    let diagnostics: Vec<WindowSlope> = (MIN_WINDOW..=longest)
        .map(|len| {
            let window = &records[count - len..];
            WindowSlope {
                first_k: window[0].k,
                last_k: window[len - 1].k,
                slope: ols_slope(window),
            }
        })
        .collect();
    if diagnostics.iter().any(|w| !w.slope.is_finite()) {
        return Err(Error::InvalidConfig("penalty is constant over a window".into()));
    }

    // (start, end) of the best run of mutually stable neighbours, inclusive.
    let mut best = (0, 0);
    let mut start = 0;
    for j in 1..diagnostics.len() {
        let prev = diagnostics[j - 1].slope;
        let stable = (diagnostics[j].slope - prev).abs() < STABILITY * prev.abs();
        if !stable {
            start = j;
        }
        if j - start >= best.1 - best.0 {
            best = (start, j);
        }
    }
    if best.1 == best.0 {
        // No stable pair: fall back to the longest window.
        best = (diagnostics.len() - 1, diagnostics.len() - 1);
    }
    let chosen = diagnostics[best.1];
    if chosen.slope <= 0.0 {
        return Err(Error::NonPositiveSlope {
            slope: chosen.slope,
        });
    }
    Ok(SlopeEstimate {
        kappa: chosen.slope,
        window: (chosen.first_k, chosen.last_k),
        diagnostics,
    })
}

/// `-l_n / n + 2 kappa pen(k)` for every candidate.
pub fn criterion_values(trace: &SelectionTrace, kappa: f64) -> Vec<(usize, f64)> {
    trace
        .records()
        .iter()
        .map(|r| (r.k, -r.loglik + 2.0 * kappa * r.pen))
        .collect()
}

/// The candidate minimizing the penalized criterion; ties go to the smaller
/// `k`.
pub fn select_k(trace: &SelectionTrace, kappa: f64) -> Result<usize> {
    if trace.is_empty() {
        return Err(Error::EmptyInput);
    }
    if !(kappa.is_finite() && kappa > 0.0) {
        return Err(Error::InvalidConfig(format!("kappa {kappa} must be positive")));
    }
    let mut best: Option<(usize, f64)> = None;
    for (k, value) in criterion_values(trace, kappa) {
        if best.is_none_or(|(_, v)| value < v) {
            best = Some((k, value));
        }
    }
    Ok(best.expect("trace is nonempty").0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn trace_from(ks: impl IntoIterator<Item = usize>, d: usize, mut loglik: impl FnMut(usize) -> f64) -> SelectionTrace {
        SelectionTrace::new(
            ks.into_iter()
                .map(|k| SelectionRecord {
                    k,
                    loglik: loglik(k),
                    pen: penalty_spherical(k, d),
                    seconds: 0.0,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn penalty_values() {
        assert_eq!(penalty_spherical(10, 100), 1000.0);
        assert_eq!(penalty_spherical(1, 1), 1.0);
        assert_eq!(penalty_spherical(5, 10), 50.0);
        assert_eq!(penalty_gmm_full(1, 1), 2.0);
        assert_eq!(penalty_gmm_full(2, 2), 11.0);
    }

    #[test]
    fn full_penalty_counts_parameters() {
        for k in 1..8 {
            for d in 1..12 {
                // k means, k symmetric covariances, k weights minus one constraint.
                let count = k * d + k * d * (d + 1) / 2 + k - 1;
                assert_eq!(penalty_gmm_full(k, d), count as f64);
            }
        }
    }

    #[test]
    fn reference_rule_increment() {
        // kappa = 1.335e-3 with d = 100 adds 0.267 per extra cluster.
        let kappa = 1.335e-3;
        let step = 2.0 * kappa * (penalty_spherical(11, 100) - penalty_spherical(10, 100));
        assert!((step - 0.267).abs() < 1e-12);
    }

    #[test]
    fn ddse_exact_line() {
        let trace = trace_from(2..=12, 10, |k| -3.0 + 0.002 * penalty_spherical(k, 10));
        let est = estimate_slope_ddse(&trace).unwrap();
        assert!((est.kappa - 0.002).abs() < 1e-12);
    }

    #[test]
    fn ddse_ignores_curved_small_models() {
        // Linear with slope 0.002 for k >= 10, strongly concave below.
        let d = 10;
        let trace = trace_from(2..=16, d, |k| {
            let pen = penalty_spherical(k, d);
            let linear = 0.002 * pen;
            if k >= 10 {
                linear
            } else {
                linear - 0.5 * (10 - k) as f64 * (10 - k) as f64
            }
        });
        let est = estimate_slope_ddse(&trace).unwrap();
        assert!((est.kappa - 0.002).abs() < 0.01 * 0.002, "{est:?}");
        assert!(est.window.0 >= 10);
        // The longest candidate window reaches into the curved part.
        assert!(est.diagnostics.iter().any(|w| w.first_k < 10));
    }

    #[test]
    fn ddse_tolerates_small_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = 10;
        let trace = trace_from(2..=20, d, |k| {
            0.002 * penalty_spherical(k, d) + rng.random_range(-1e-5..1e-5)
        });
        let est = estimate_slope_ddse(&trace).unwrap();
        assert!((est.kappa - 0.002).abs() < 0.05 * 0.002);
    }

    #[test]
    fn ddse_errors() {
        let short = trace_from(2..=4, 3, |k| k as f64);
        assert!(matches!(
            estimate_slope_ddse(&short),
            Err(Error::TooFewCandidates { needed: 4, got: 3 })
        ));
        let falling = trace_from(2..=9, 3, |k| -(k as f64));
        assert!(matches!(
            estimate_slope_ddse(&falling),
            Err(Error::NonPositiveSlope { .. })
        ));
    }

    #[test]
    fn select_single_candidate() {
        let trace = trace_from([7], 4, |_| -1.0);
        assert_eq!(select_k(&trace, 0.1).unwrap(), 7);
    }

    #[test]
    fn select_finds_the_elbow() {
        let d = 10;
        let kappa = 0.001;
        // Steep gains up to k = 5, then gains of 0.01 per k, below 2 kappa d = 0.02.
        let trace = trace_from(2..=10, d, |k| {
            if k <= 5 {
                -5.0 + k as f64
            } else {
                0.0 + 0.01 * (k - 5) as f64
            }
        });
        assert_eq!(select_k(&trace, kappa).unwrap(), 5);
    }

    #[test]
    fn select_ties_go_to_smaller_k() {
        let trace = trace_from(2..=4, 1, |k| 2.0 * 0.5 * k as f64);
        assert_eq!(select_k(&trace, 0.5).unwrap(), 2);
    }

    #[test]
    fn trace_rejects_unordered_k() {
        let r = |k| SelectionRecord {
            k,
            loglik: 0.0,
            pen: 1.0,
            seconds: 0.0,
        };
        assert!(SelectionTrace::new(vec![r(3), r(2)]).is_err());
        assert!(SelectionTrace::new(vec![r(3), r(3)]).is_err());
    }

    #[test]
    fn trace_csv_round_trip() {
        let trace = trace_from(2..=6, 7, |k| -1.0 / 3.0 * k as f64 + 0.1);
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("k,loglik,pen,seconds\n"));
        assert_eq!(SelectionTrace::read_csv(buf.as_slice()).unwrap(), trace);
        assert!(SelectionTrace::read_csv("a,b\n1,2\n".as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn select_is_shift_invariant(
            values in prop::collection::vec(-10.0f64..10.0, 1..12),
            shift in -100.0f64..100.0,
            kappa in 1e-4f64..1.0,
        ) {
            let base = trace_from(1..=values.len(), 3, |k| values[k - 1]);
            let moved = trace_from(1..=values.len(), 3, |k| values[k - 1] + shift);
            prop_assert_eq!(select_k(&base, kappa).unwrap(), select_k(&moved, kappa).unwrap());
        }

        #[test]
        fn larger_kappa_never_selects_more(
            values in prop::collection::vec(-10.0f64..10.0, 1..12),
            kappa in 1e-4f64..1.0,
            factor in 1.0f64..10.0,
        ) {
            let trace = trace_from(1..=values.len(), 3, |k| values[k - 1]);
            prop_assert!(select_k(&trace, kappa * factor).unwrap() <= select_k(&trace, kappa).unwrap());
        }

        #[test]
        fn affine_trace_gives_exact_slope(
            count in 4usize..30,
            intercept in -50.0f64..50.0,
            slope in 1e-4f64..1.0,
            d in 1usize..50,
        ) {
            let trace = trace_from(2..2 + count, d, |k| intercept + slope * penalty_spherical(k, d));
            let est = estimate_slope_ddse(&trace).unwrap();
            prop_assert!((est.kappa - slope).abs() <= 1e-9 * slope.max(1.0));
        }

        #[test]
        fn full_penalty_is_linear(k in 2usize..100, d in 1usize..200) {
            let step = penalty_gmm_full(k, d) - penalty_gmm_full(k - 1, d);
            prop_assert_eq!(step, penalty_gmm_full(2, d) - penalty_gmm_full(1, d));
        }
    }
}
