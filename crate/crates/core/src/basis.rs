//! Stage 1: cubic B-spline systems, design matrices and the per-series
//! least-squares filter that turns each sampled series into a coefficient
//! vector.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Order of a cubic spline (degree 3).
pub const CUBIC_ORDER: usize = 4;

/// `X^T X` is treated as singular when its smallest singular value is below
/// this fraction of the largest one.
pub const SINGULAR_RATIO: f64 = 1e-10;

/// Strictly increasing sample times shared by every series.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    points: Vec<f64>,
}

impl TimeGrid {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidGrid("no time points".into()));
        }
        if points.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidGrid("non-finite time point".into()));
        }
        if let Some(w) = points.windows(2).find(|w| w[0] >= w[1]) {
            return Err(Error::InvalidGrid(format!(
                "times must be strictly increasing ({} then {})",
                w[0], w[1]
            )));
        }
        Ok(Self { points })
    }

    /// `m` equally spaced points from `lo` to `hi` inclusive. A single point
    /// sits at `lo`.
    pub fn uniform(lo: f64, hi: f64, m: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::InvalidGrid("no time points".into()));
        }
        if m == 1 {
            return Self::new(vec![lo]);
        }
        if !(lo < hi) {
            return Err(Error::DegenerateDomain { lo, hi });
        }
        let step = (hi - lo) / (m - 1) as f64;
        let mut points: Vec<f64> = (0..m).map(|j| lo + step * j as f64).collect();
        points[m - 1] = hi;
        Self::new(points)
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn first(&self) -> f64 {
        self.points[0]
    }

    pub fn last(&self) -> f64 {
        self.points[self.points.len() - 1]
    }
}

/// A clamped B-spline system on `[lo, hi]` with equally spaced breakpoints.
///
/// With `d` basis functions of order `p` there are `d - p + 2` breakpoints
/// (both endpoints included), so a cubic system has `d - 2` of them. The
/// boundary knots are repeated `p` times, which makes the first and last basis
/// functions interpolate the endpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisSystem {
    order: usize,
    n_basis: usize,
    lo: f64,
    hi: f64,
    breakpoints: Vec<f64>,
    knots: Vec<f64>,
}

impl BasisSystem {
    /// Cubic system with `d` basis functions.
    pub fn cubic(lo: f64, hi: f64, d: usize) -> Result<Self> {
        Self::with_order(lo, hi, d, CUBIC_ORDER)
    }

    pub fn with_order(lo: f64, hi: f64, d: usize, order: usize) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::DegenerateDomain { lo, hi });
        }
        if order == 0 || d < order {
            return Err(Error::TooFewBasis { d, order });
        }
        let n_breaks = d - order + 2;
        let step = (hi - lo) / (n_breaks - 1) as f64;
        let mut breakpoints: Vec<f64> = (0..n_breaks).map(|j| lo + step * j as f64).collect();
        breakpoints[n_breaks - 1] = hi;

        let mut knots = Vec::with_capacity(d + order);
        knots.extend(std::iter::repeat_n(lo, order - 1));
        knots.extend_from_slice(&breakpoints);
        knots.extend(std::iter::repeat_n(hi, order - 1));
        debug_assert_eq!(knots.len(), d + order);

        Ok(Self {
            order,
            n_basis: d,
            lo,
            hi,
            breakpoints,
            knots,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Number of basis functions `d`.
    pub fn len(&self) -> usize {
        self.n_basis
    }

    pub fn is_empty(&self) -> bool {
        self.n_basis == 0
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    fn check_domain(&self, t: f64) -> Result<()> {
        if t >= self.lo && t <= self.hi {
            Ok(())
        } else {
            Err(Error::OutOfDomain {
                t,
                lo: self.lo,
                hi: self.hi,
            })
        }
    }

    /// The nonzero basis values at `t`: returns the index of the first
    /// nonzero function and the `order` values starting there.
    ///
    /// Uses the triangular Cox-de Boor scheme, which only ever adds
    /// nonnegative terms.
    pub fn nonzero(&self, t: f64) -> Result<(usize, Vec<f64>)> {
        self.check_domain(t)?;
        let p = self.order - 1;
        let d = self.n_basis;
        // Knot span s with knots[s] <= t < knots[s + 1], clamped to the last
        // nonempty span so that t == hi is covered.
        let count = self.knots[p..d].partition_point(|&k| k <= t);
        let span = p + count - 1;

        let mut values = vec![0.0; self.order];
        let mut left = vec![0.0; self.order];
        let mut right = vec![0.0; self.order];
        values[0] = 1.0;
        for j in 1..=p {
            left[j] = t - self.knots[span + 1 - j];
            right[j] = self.knots[span + j] - t;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = values[r] / (right[r + 1] + left[j - r]);
                values[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            values[j] = saved;
        }
        Ok((span - p, values))
    }

    /// The full `d`-vector `x(t)`.
    pub fn evaluate(&self, t: f64) -> Result<Vec<f64>> {
        let (first, values) = self.nonzero(t)?;
        let mut out = vec![0.0; self.n_basis];
        out[first..first + values.len()].copy_from_slice(&values);
        Ok(out)
    }

    /// `b^T x(t)`: the curve represented by coefficients `b`.
    pub fn reconstruct(&self, coefs: &[f64], t: f64) -> Result<f64> {
        if coefs.len() != self.n_basis {
            return Err(Error::ShapeMismatch {
                what: "coefficient vector",
                expected: self.n_basis,
                got: coefs.len(),
            });
        }
        let (first, values) = self.nonzero(t)?;
        Ok(values
            .iter()
            .zip(&coefs[first..])
            .map(|(x, b)| x * b)
            .sum())
    }
}

enum GramSolver {
    Cholesky(Cholesky<f64, Dyn>),
    Pseudo(DMatrix<f64>),
}

/// `X` (m x d) with `X^T X` factorized once, so every series sharing the grid
/// is filtered with one matrix-vector product and one solve.
pub struct DesignMatrix {
    x: DMatrix<f64>,
    solver: GramSolver,
}

impl std::fmt::Debug for DesignMatrix {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DesignMatrix")
            .field("rows", &self.x.nrows())
            .field("cols", &self.x.ncols())
            .field("full_rank", &self.is_full_rank())
            .finish()
    }
}

impl DesignMatrix {
    /// Evaluates `system` at every point of `grid`.
    pub fn new(system: &BasisSystem, grid: &TimeGrid) -> Result<Self> {
        let m = grid.len();
        let d = system.len();
        let mut x = DMatrix::zeros(m, d);
        for (j, &t) in grid.points().iter().enumerate() {
            let (first, values) = system.nonzero(t)?;
            for (c, v) in values.into_iter().enumerate() {
                x[(j, first + c)] = v;
            }
        }
        Self::from_matrix(x)
    }

    /// Wraps an arbitrary design matrix.
    pub fn from_matrix(x: DMatrix<f64>) -> Result<Self> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("design matrix"));
        }
        let gram = x.tr_mul(&x);
        let eigen = SymmetricEigen::new(gram.clone());
        let largest = eigen.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let smallest = eigen
            .eigenvalues
            .iter()
            .fold(f64::INFINITY, |a, v| a.min(v.abs()));
        let cutoff = SINGULAR_RATIO * largest;

        let cholesky = if largest > 0.0 && smallest > cutoff {
            Cholesky::new(gram)
        } else {
            None
        };
        let solver = match cholesky {
            Some(c) => GramSolver::Cholesky(c),
            None => {
                let inv = eigen
                    .eigenvalues
                    .map(|v| if v.abs() > cutoff && v != 0.0 { 1.0 / v } else { 0.0 });
                let q = &eigen.eigenvectors;
                GramSolver::Pseudo(q * DMatrix::from_diagonal(&inv) * q.transpose())
            }
        };
        Ok(Self { x, solver })
    }

    pub fn rows(&self) -> usize {
        self.x.nrows()
    }

    pub fn cols(&self) -> usize {
        self.x.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn gram(&self) -> DMatrix<f64> {
        self.x.tr_mul(&self.x)
    }

    /// Whether the Cholesky path is in use (otherwise the pseudoinverse).
    pub fn is_full_rank(&self) -> bool {
        matches!(self.solver, GramSolver::Cholesky(_))
    }

    /// Least-squares coefficients for one series. Falls back to the
    /// minimum-norm solution when `X^T X` is singular.
    pub fn ols_fit(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.rows() {
            return Err(Error::ShapeMismatch {
                what: "series length",
                expected: self.rows(),
                got: z.len(),
            });
        }
        let xtz = self.x.tr_mul(&DVector::from_column_slice(z));
        let b = match &self.solver {
            GramSolver::Cholesky(c) => c.solve(&xtz),
            GramSolver::Pseudo(p) => p * xtz,
        };
        Ok(b.as_slice().to_vec())
    }

    /// Filters every row of `series`; rows are independent, so the result does
    /// not depend on the thread count.
    pub fn fit_all(&self, series: &SeriesMatrix) -> Result<CoefSet> {
        if series.m() != self.rows() {
            return Err(Error::ShapeMismatch {
                what: "series length",
                expected: self.rows(),
                got: series.m(),
            });
        }
        let rows: Vec<Vec<f64>> = (0..series.n())
            .into_par_iter()
            .map(|i| self.ols_fit(series.row(i)))
            .collect::<Result<_>>()?;
        CoefSet::from_rows(rows, self.cols())
    }
}

/// Residuals of the least-squares line through `(t_j, z_j)`.
pub fn detrend(series: &[f64], grid: &TimeGrid) -> Result<Vec<f64>> {
    let m = grid.len();
    if series.len() != m {
        return Err(Error::ShapeMismatch {
            what: "series length",
            expected: m,
            got: series.len(),
        });
    }
    if m < 2 {
        return Err(Error::InvalidGrid("detrending needs at least two points".into()));
    }
    let t = grid.points();
    let t_mean = t.iter().sum::<f64>() / m as f64;
    let z_mean = series.iter().sum::<f64>() / m as f64;
    let stt: f64 = t.iter().map(|v| (v - t_mean) * (v - t_mean)).sum();
    if stt == 0.0 {
        return Err(Error::ConstantGrid);
    }
    let stz: f64 = t
        .iter()
        .zip(series)
        .map(|(tv, zv)| (tv - t_mean) * (zv - z_mean))
        .sum();
    let slope = stz / stt;
    Ok(t
        .iter()
        .zip(series)
        .map(|(tv, zv)| zv - z_mean - slope * (tv - t_mean))
        .collect())
}

/// `n` series sampled at the same `m` times, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesMatrix {
    n: usize,
    m: usize,
    values: Vec<f64>,
}

impl SeriesMatrix {
    pub fn new(n: usize, m: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * m {
            return Err(Error::ShapeMismatch {
                what: "series matrix",
                expected: n * m,
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("series values"));
        }
        Ok(Self { n, m, values })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.m..(i + 1) * self.m]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Applies [`detrend`] to every row.
    pub fn detrended(&self, grid: &TimeGrid) -> Result<Self> {
        let rows: Vec<Vec<f64>> = (0..self.n)
            .into_par_iter()
            .map(|i| detrend(self.row(i), grid))
            .collect::<Result<_>>()?;
        Self::new(self.n, self.m, rows.concat())
    }
}

/// Per-column centering and scaling applied to a [`CoefSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnStats {
    pub means: Vec<f64>,
    /// Sample standard deviations; 1 for columns that were constant.
    pub scales: Vec<f64>,
}

/// The `n x d` matrix of filtered coefficient vectors, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefSet {
    n: usize,
    d: usize,
    values: Vec<f64>,
    normalization: Option<ColumnStats>,
}

impl CoefSet {
    pub fn new(n: usize, d: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * d {
            return Err(Error::ShapeMismatch {
                what: "coefficient matrix",
                expected: n * d,
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("coefficients"));
        }
        Ok(Self {
            n,
            d,
            values,
            normalization: None,
        })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>, d: usize) -> Result<Self> {
        let n = rows.len();
        if let Some(bad) = rows.iter().find(|r| r.len() != d) {
            return Err(Error::ShapeMismatch {
                what: "coefficient row",
                expected: d,
                got: bad.len(),
            });
        }
        Self::new(n, d, rows.concat())
    }

    pub(crate) fn with_normalization(mut self, stats: Option<ColumnStats>) -> Self {
        self.normalization = stats;
        self
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.values.chunks_exact(self.d.max(1)).take(self.n)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn normalization(&self) -> Option<&ColumnStats> {
        self.normalization.as_ref()
    }
}
