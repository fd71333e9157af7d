//! Gaussian mixtures over coefficient vectors: densities, the spherical
//! equal-weight log-likelihood used for model selection, the Bayes and
//! nearest-mean allocation rules, and an EM fit of the full-covariance
//! mixture.

use std::cmp::Ordering;
use std::f64::consts::PI;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::basis::CoefSet;
use crate::error::{Error, Result};
use crate::numeric::{argmax, argmin, log_sum_exp, squared_distance};
use crate::rng;
use crate::tclust::{trimmed_kmeans, TrimSpec};

/// A Gaussian with its covariance Cholesky factor cached.
#[derive(Debug, Clone)]
struct GaussianFactor {
    d: usize,
    mean: Vec<f64>,
    /// Lower-triangular factor, row-major.
    chol: Vec<f64>,
    /// `-0.5 * log|2 pi V|`.
    log_norm: f64,
}

impl GaussianFactor {
    fn new(mean: &[f64], cov: &DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::ShapeMismatch {
                what: "covariance",
                expected: d,
                got: cov.nrows(),
            });
        }
        let scale = cov.amax().max(f64::MIN_POSITIVE);
        for r in 0..d {
            for c in 0..r {
                if (cov[(r, c)] - cov[(c, r)]).abs() > 1e-12 * scale {
                    return Err(Error::NotPositiveDefinite);
                }
            }
        }
        let l = cov
            .clone()
            .cholesky()
            .ok_or(Error::NotPositiveDefinite)?
            .l();
        let log_det: f64 = 2.0 * (0..d).map(|i| l[(i, i)].ln()).sum::<f64>();
        if !log_det.is_finite() {
            return Err(Error::NotPositiveDefinite);
        }
        let mut chol = vec![0.0; d * d];
        for r in 0..d {
            for c in 0..=r {
                chol[r * d + c] = l[(r, c)];
            }
        }
        Ok(Self {
            d,
            mean: mean.to_vec(),
            chol,
            log_norm: -0.5 * (d as f64 * (2.0 * PI).ln() + log_det),
        })
    }

    fn log_density(&self, b: &[f64]) -> f64 {
        let d = self.d;
        let mut y = vec![0.0; d];
        let mut quad = 0.0;
        for r in 0..d {
            let row = &self.chol[r * d..r * d + r + 1];
            let mut acc = b[r] - self.mean[r];
            for c in 0..r {
                acc -= row[c] * y[c];
            }
            y[r] = acc / row[r];
            quad += y[r] * y[r];
        }
        self.log_norm - 0.5 * quad
    }
}

/// `log phi_d(b; mu, V)` for a symmetric positive definite `V`.
pub fn gaussian_log_density(b: &[f64], mean: &[f64], cov: &DMatrix<f64>) -> Result<f64> {
    if b.len() != mean.len() {
        return Err(Error::ShapeMismatch {
            what: "point",
            expected: mean.len(),
            got: b.len(),
        });
    }
    Ok(GaussianFactor::new(mean, cov)?.log_density(b))
}

/// Full mixture parameters: weights, means and covariances of `k` components.
#[derive(Debug, Clone)]
pub struct GmmParams {
    weights: Vec<f64>,
    covariances: Vec<DMatrix<f64>>,
    factors: Vec<GaussianFactor>,
}

impl GmmParams {
    /// Validates and factorizes the components. Weights only need to be
    /// positive; they are normalized to sum to one.
    pub fn new(
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        covariances: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return Err(Error::InvalidMixture("no components".into()));
        }
        if means.len() != k || covariances.len() != k {
            return Err(Error::InvalidMixture(format!(
                "{k} weights but {} means and {} covariances",
                means.len(),
                covariances.len()
            )));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::InvalidMixture("weights must be positive".into()));
        }
        let d = means[0].len();
        if d == 0 || means.iter().any(|m| m.len() != d) {
            return Err(Error::InvalidMixture("means must share a positive dimension".into()));
        }
        let total: f64 = weights.iter().sum();
        let weights: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let factors = means
            .iter()
            .zip(&covariances)
            .map(|(m, v)| GaussianFactor::new(m, v))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            weights,
            covariances,
            factors,
        })
    }

    /// Equal weights and covariance `lambda * I` for every component.
    pub fn spherical(means: Vec<Vec<f64>>, lambda: f64) -> Result<Self> {
        let k = means.len();
        let d = means.first().map_or(0, Vec::len);
        let cov = DMatrix::identity(d, d) * lambda;
        Self::new(vec![1.0; k], means, vec![cov; k])
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn d(&self) -> usize {
        self.factors[0].d
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mean(&self, c: usize) -> &[f64] {
        &self.factors[c].mean
    }

    pub fn means(&self) -> Vec<Vec<f64>> {
        self.factors.iter().map(|f| f.mean.clone()).collect()
    }

    pub fn covariances(&self) -> &[DMatrix<f64>] {
        &self.covariances
    }

    /// `log pi_c + log phi_d(b; mu_c, V_c)` for every component.
    fn log_joint(&self, b: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.factors)
            .map(|(w, f)| w.ln() + f.log_density(b))
            .collect()
    }

    fn check_point(&self, b: &[f64]) -> Result<()> {
        if b.len() != self.d() {
            return Err(Error::ShapeMismatch {
                what: "point",
                expected: self.d(),
                got: b.len(),
            });
        }
        Ok(())
    }
}

/// `log sum_c pi_c phi_d(b; mu_c, V_c)`.
pub fn mixture_log_density(b: &[f64], params: &GmmParams) -> Result<f64> {
    params.check_point(b)?;
    Ok(log_sum_exp(&params.log_joint(b)))
}

/// Sample log-likelihood `sum_i log f(b_i; psi)`.
pub fn mixture_log_likelihood(data: &CoefSet, params: &GmmParams) -> Result<f64> {
    if data.d() != params.d() {
        return Err(Error::ShapeMismatch {
            what: "coefficient dimension",
            expected: params.d(),
            got: data.d(),
        });
    }
    let per_point: Vec<f64> = (0..data.n())
        .into_par_iter()
        .map(|i| log_sum_exp(&params.log_joint(data.row(i))))
        .collect();
    Ok(per_point.iter().sum())
}

/// Bayes allocation: the component with the largest `pi_c phi_d(b; mu_c, V_c)`
/// (0-based, ties to the lowest index).
pub fn bayes_allocate(b: &[f64], params: &GmmParams) -> Result<usize> {
    params.check_point(b)?;
    Ok(argmax(params.log_joint(b)))
}

/// Means of a spherical equal-weight mixture, kept in lexicographic order
/// once finalized.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanModel {
    means: Vec<Vec<f64>>,
    lambda: f64,
    alpha: f64,
}

impl MeanModel {
    pub fn new(means: Vec<Vec<f64>>, lambda: f64, alpha: f64) -> Result<Self> {
        if means.is_empty() {
            return Err(Error::InvalidMixture("no means".into()));
        }
        let d = means[0].len();
        if means.iter().any(|m| m.len() != d) {
            return Err(Error::InvalidMixture("means must share a dimension".into()));
        }
        if means.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("means"));
        }
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(Error::InvalidMixture(format!("scale {lambda} must be positive")));
        }
        if !(0.0..1.0).contains(&alpha) {
            return Err(Error::InvalidTrim(alpha));
        }
        Ok(Self {
            means,
            lambda,
            alpha,
        })
    }

    pub fn k(&self) -> usize {
        self.means.len()
    }

    pub fn d(&self) -> usize {
        self.means[0].len()
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn mean(&self, c: usize) -> &[f64] {
        &self.means[c]
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub(crate) fn means_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.means
    }

    /// Reorders the means lexicographically. Returns `perm` with
    /// `perm[old] = new`.
    pub fn sort_lexicographic(&mut self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.k()).collect();
        order.sort_by(|&a, &b| lexicographic(&self.means[a], &self.means[b]).then(a.cmp(&b)));
        let mut perm = vec![0; self.k()];
        for (new, &old) in order.iter().enumerate() {
            perm[old] = new;
        }
        self.means = order.iter().map(|&o| self.means[o].clone()).collect();
        perm
    }

    pub fn is_lexicographic(&self) -> bool {
        self.means
            .windows(2)
            .all(|w| lexicographic(&w[0], &w[1]) != Ordering::Greater)
    }
}

pub(crate) fn lexicographic(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Nearest-mean allocation (0-based, ties to the lowest index).
pub fn kmeans_allocate(b: &[f64], model: &MeanModel) -> usize {
    argmin(model.means.iter().map(|m| squared_distance(b, m)))
}

/// Log-likelihood of the equal-weight spherical mixture with covariance
/// `lambda * I` at the model's means.
pub fn spherical_log_likelihood(data: &CoefSet, model: &MeanModel) -> Result<f64> {
    if data.d() != model.d() {
        return Err(Error::ShapeMismatch {
            what: "coefficient dimension",
            expected: model.d(),
            got: data.d(),
        });
    }
    let k = model.k() as f64;
    let d = model.d() as f64;
    let lambda = model.lambda;
    let constant = -k.ln() - 0.5 * d * (2.0 * PI * lambda).ln();
    let per_point: Vec<f64> = (0..data.n())
        .into_par_iter()
        .map(|i| {
            let b = data.row(i);
            let terms: Vec<f64> = model
                .means
                .iter()
                .map(|m| constant - squared_distance(b, m) / (2.0 * lambda))
                .collect();
            log_sum_exp(&terms)
        })
        .collect();
    Ok(per_point.iter().sum())
}

/// Result of an EM run.
#[derive(Debug, Clone)]
pub struct GmmFit {
    pub params: GmmParams,
    /// Sample log-likelihood after initialization and after every iteration.
    pub loglik_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub ridge: f64,
}

impl GmmFit {
    pub fn loglik(&self) -> f64 {
        *self.loglik_history.last().expect("history is never empty")
    }
}

/// Relative convergence threshold: stop once an iteration gains less than
/// this much log-likelihood per observation.
pub const EM_TOLERANCE: f64 = 1e-6;

/// EM for the full-covariance mixture, started from one untrimmed k-means
/// run. Every M-step adds `ridge * I` to each covariance; the default ridge
/// is `1e-6` times the mean diagonal of the pooled covariance.
pub fn fit_gmm_em(
    data: &CoefSet,
    k: usize,
    seed: u64,
    max_iter: usize,
    ridge: Option<f64>,
) -> Result<GmmFit> {
    let n = data.n();
    let d = data.d();
    if k == 0 || d == 0 {
        return Err(Error::InvalidMixture("k and d must be positive".into()));
    }
    if k >= n {
        return Err(Error::TooFewObservations { n, k });
    }
    let pooled = weighted_covariance(data, &vec![1.0; n], &column_means(data));
    let mean_diag = pooled.diagonal().mean();
    if mean_diag <= 0.0 {
        return Err(Error::IdenticalData);
    }
    let ridge = ridge.unwrap_or(1e-6 * mean_diag);

    let init = trimmed_kmeans(
        data,
        k,
        TrimSpec::new(0.0)?,
        1,
        20,
        rng::derive_key(seed, &[rng::TAG_GMM_INIT]),
    )?;
    let mut resp = vec![0.0; n * k];
    for (i, &label) in init.labels.iter().enumerate() {
        resp[i * k + label] = 1.0;
    }
    let mut params = m_step(data, &resp, k, ridge, None, &pooled)?;
    let (mut ll, mut resp) = e_step(data, &params);
    let mut history = vec![ll];
    let mut iterations = 0;
    let mut converged = false;
    for _ in 0..max_iter {
        let next = m_step(data, &resp, k, ridge, Some(&params), &pooled)?;
        let (next_ll, next_resp) = e_step(data, &next);
        history.push(next_ll);
        params = next;
        resp = next_resp;
        iterations += 1;
        let gain = next_ll - ll;
        ll = next_ll;
        if gain < EM_TOLERANCE * n as f64 {
            converged = true;
            break;
        }
    }
    Ok(GmmFit {
        params,
        loglik_history: history,
        iterations,
        converged,
        ridge,
    })
}

/// Runs [`fit_gmm_em`] from `restarts` independent initializations and keeps
/// the highest final log-likelihood (ties to the earliest restart).
pub fn fit_gmm_em_restarts(
    data: &CoefSet,
    k: usize,
    seed: u64,
    restarts: usize,
    max_iter: usize,
    ridge: Option<f64>,
) -> Result<GmmFit> {
    if restarts == 0 {
        return Err(Error::InvalidConfig("restarts must be positive".into()));
    }
    let fits: Vec<GmmFit> = (0..restarts as u64)
        .into_par_iter()
        .map(|r| fit_gmm_em(data, k, rng::derive_key(seed, &[r]), max_iter, ridge))
        .collect::<Result<_>>()?;
    let mut best = 0;
    for (r, fit) in fits.iter().enumerate() {
        if fit.loglik() > fits[best].loglik() {
            best = r;
        }
    }
    Ok(fits.into_iter().nth(best).expect("restarts > 0"))
}

fn column_means(data: &CoefSet) -> Vec<f64> {
    let mut sums = vec![0.0; data.d()];
    for row in data.rows() {
        for (s, v) in sums.iter_mut().zip(row) {
            *s += v;
        }
    }
    sums.iter().map(|s| s / data.n() as f64).collect()
}

/// `sum_i w_i (b_i - mean)(b_i - mean)^T / sum_i w_i`.
fn weighted_covariance(data: &CoefSet, weights: &[f64], mean: &[f64]) -> DMatrix<f64> {
    let d = data.d();
    let mut cov = DMatrix::zeros(d, d);
    let mut total = 0.0;
    let mut diff = vec![0.0; d];
    for (row, &w) in data.rows().zip(weights) {
        if w == 0.0 {
            continue;
        }
        total += w;
        for (x, (b, m)) in diff.iter_mut().zip(row.iter().zip(mean)) {
            *x = b - m;
        }
        for r in 0..d {
            let wr = w * diff[r];
            for c in 0..=r {
                cov[(r, c)] += wr * diff[c];
            }
        }
    }
    for r in 0..d {
        for c in 0..r {
            cov[(c, r)] = cov[(r, c)];
        }
    }
    if total > 0.0 {
        cov /= total;
    }
    cov
}

fn e_step(data: &CoefSet, params: &GmmParams) -> (f64, Vec<f64>) {
    let k = params.k();
    let rows: Vec<(f64, Vec<f64>)> = (0..data.n())
        .into_par_iter()
        .map(|i| {
            let joint = params.log_joint(data.row(i));
            let lse = log_sum_exp(&joint);
            let resp = joint.iter().map(|j| (j - lse).exp()).collect();
            (lse, resp)
        })
        .collect();
    let mut ll = 0.0;
    let mut resp = Vec::with_capacity(data.n() * k);
    for (lse, r) in rows {
        ll += lse;
        resp.extend(r);
    }
    (ll, resp)
}

fn m_step(
    data: &CoefSet,
    resp: &[f64],
    k: usize,
    ridge: f64,
    previous: Option<&GmmParams>,
    pooled: &DMatrix<f64>,
) -> Result<GmmParams> {
    let n = data.n();
    let d = data.d();
    let mut weights = Vec::with_capacity(k);
    let mut means = Vec::with_capacity(k);
    let mut covs = Vec::with_capacity(k);
    for c in 0..k {
        let w: Vec<f64> = (0..n).map(|i| resp[i * k + c]).collect();
        let mass: f64 = w.iter().sum();
        if mass <= 1e-12 * n as f64 {
            // A component that lost all its mass keeps its previous shape with
            // a vanishing weight.
            let (mean, cov) = match previous {
                Some(p) => (p.mean(c).to_vec(), p.covariances()[c].clone()),
                None => (column_means(data), pooled + DMatrix::identity(d, d) * ridge),
            };
            weights.push(f64::MIN_POSITIVE.max(1e-300));
            means.push(mean);
            covs.push(cov);
            continue;
        }
        let mut mean = vec![0.0; d];
        for (row, &wi) in data.rows().zip(&w) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += wi * v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= mass);
        let cov = weighted_covariance(data, &w, &mean) + DMatrix::identity(d, d) * ridge;
        weights.push(mass / n as f64);
        means.push(mean);
        covs.push(cov);
    }
    GmmParams::new(weights, means, covs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    const LN_2PI: f64 = 1.837_877_066_409_345_3;

    fn scalar_normal_pdf(x: f64) -> f64 {
        (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
    }

    #[test]
    fn gaussian_density_closed_forms() {
        let v = gaussian_log_density(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], &DMatrix::identity(3, 3))
            .unwrap();
        assert!((v + 1.5 * LN_2PI).abs() < 1e-14);

        let v = gaussian_log_density(&[1.0], &[0.0], &DMatrix::identity(1, 1)).unwrap();
        assert!((v - (-0.5 * LN_2PI - 0.5)).abs() < 1e-14);
        assert!((v + 1.41894).abs() < 1e-5);

        let cov = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![4.0, 1.0]));
        let v = gaussian_log_density(&[2.0, 0.0], &[0.0, 0.0], &cov).unwrap();
        let expected = -LN_2PI - 0.5 * 4f64.ln() - 0.5;
        assert!((v - expected).abs() < 1e-14);
    }

    #[test]
    fn gaussian_density_rejects_indefinite() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            gaussian_log_density(&[0.0, 0.0], &[0.0, 0.0], &cov),
            Err(Error::NotPositiveDefinite)
        ));
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        assert!(gaussian_log_density(&[0.0, 0.0], &[0.0, 0.0], &asym).is_err());
    }

    #[test]
    fn mixture_density_reductions() {
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let one = GmmParams::new(vec![1.0], vec![vec![0.5, -1.0]], vec![cov.clone()]).unwrap();
        let b = [1.0, 0.25];
        let single = gaussian_log_density(&b, &[0.5, -1.0], &cov).unwrap();
        assert!((mixture_log_density(&b, &one).unwrap() - single).abs() < 1e-14);

        let two = GmmParams::new(
            vec![0.5, 0.5],
            vec![vec![0.5, -1.0]; 2],
            vec![cov.clone(), cov],
        )
        .unwrap();
        assert!((mixture_log_density(&b, &two).unwrap() - single).abs() < 1e-14);
    }

    #[test]
    fn mixture_density_scalar_oracle() {
        let one = DMatrix::identity(1, 1);
        let p = GmmParams::new(vec![0.3, 0.7], vec![vec![0.0], vec![3.0]], vec![one.clone(), one])
            .unwrap();
        let expected = (0.3 * scalar_normal_pdf(1.0) + 0.7 * scalar_normal_pdf(-2.0)).ln();
        assert!((mixture_log_density(&[1.0], &p).unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn mixture_density_stays_finite_far_away() {
        let p = GmmParams::spherical(vec![vec![0.0, 0.0], vec![1.0, 1.0]], 0.01).unwrap();
        let v = mixture_log_density(&[1e4, -1e4], &p).unwrap();
        assert!(v.is_finite());
    }

    #[test]
    fn weights_are_normalized() {
        let one = DMatrix::identity(1, 1);
        let p = GmmParams::new(vec![3.0, 1.0], vec![vec![0.0], vec![1.0]], vec![one.clone(), one])
            .unwrap();
        assert_eq!(p.weights(), &[0.75, 0.25]);
        assert!(GmmParams::new(vec![0.0], vec![vec![0.0]], vec![DMatrix::identity(1, 1)]).is_err());
    }

    #[test]
    fn bayes_rule_prior_overrides_distance() {
        let one = DMatrix::identity(1, 1);
        let p = GmmParams::new(vec![0.9, 0.1], vec![vec![0.0], vec![2.0]], vec![one.clone(), one])
            .unwrap();
        let log_odds = 9f64.ln() - (1.2f64.powi(2) - 0.8f64.powi(2)) / 2.0;
        assert!(log_odds > 0.0);
        assert_eq!(bayes_allocate(&[1.2], &p).unwrap(), 0);
    }

    #[test]
    fn bayes_rule_at_a_mean() {
        let means = vec![vec![0.0, 0.0], vec![3.0, 1.0], vec![-2.0, 4.0]];
        let p = GmmParams::spherical(means.clone(), 0.5).unwrap();
        for (c, m) in means.iter().enumerate() {
            assert_eq!(bayes_allocate(m, &p).unwrap(), c);
        }
    }

    #[test]
    fn kmeans_rule_ties_and_oracle() {
        let model = MeanModel::new(vec![vec![0.0], vec![2.0]], 1.0, 0.0).unwrap();
        assert_eq!(kmeans_allocate(&[1.0], &model), 0);
        assert_eq!(kmeans_allocate(&[2.0], &model), 1);

        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let means: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..3).map(|_| rng.random_range(-3.0..3.0)).collect())
            .collect();
        let model = MeanModel::new(means.clone(), 1.0, 0.0).unwrap();
        for _ in 0..100 {
            let b: Vec<f64> = (0..3).map(|_| rng.random_range(-4.0..4.0)).collect();
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, m) in means.iter().enumerate() {
                let dist: f64 = m.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum();
                if dist < best_d {
                    best_d = dist;
                    best = c;
                }
            }
            assert_eq!(kmeans_allocate(&b, &model), best);
        }
    }

    #[test]
    fn spherical_loglik_single_point() {
        let data = CoefSet::from_rows(vec![vec![1.0, -2.0, 0.5]], 3).unwrap();
        let model = MeanModel::new(vec![vec![1.0, -2.0, 0.5]], 1.0, 0.0).unwrap();
        let v = spherical_log_likelihood(&data, &model).unwrap();
        assert!((v + 1.5 * LN_2PI).abs() < 1e-14);
    }

    #[test]
    fn spherical_loglik_double_loop_oracle() {
        let rows = vec![vec![0.0, 1.0], vec![2.0, -1.0], vec![0.5, 0.5]];
        let means = vec![vec![0.0, 0.0], vec![1.5, -0.5]];
        let lambda = 1.0;
        let data = CoefSet::from_rows(rows.clone(), 2).unwrap();
        let model = MeanModel::new(means.clone(), lambda, 0.0).unwrap();
        let mut oracle = 0.0;
        for b in &rows {
            let mut inner = 0.0;
            for m in &means {
                let sq: f64 = b.iter().zip(m).map(|(x, y)| (x - y).powi(2)).sum();
                inner += 0.5 * (-sq / 2.0).exp() / (2.0 * PI * lambda);
            }
            oracle += f64::ln(inner);
        }
        let v = spherical_log_likelihood(&data, &model).unwrap();
        assert!((v - oracle).abs() < 1e-10);
    }

    #[test]
    fn spherical_loglik_translation_and_permutation() {
        let rows = vec![vec![0.0, 1.0], vec![2.0, -1.0], vec![0.5, 0.5], vec![-3.0, 2.0]];
        let means = vec![vec![0.0, 0.0], vec![1.5, -0.5], vec![-2.0, 2.0]];
        let shift = [10.0, -7.5];
        let base = spherical_log_likelihood(
            &CoefSet::from_rows(rows.clone(), 2).unwrap(),
            &MeanModel::new(means.clone(), 0.7, 0.0).unwrap(),
        )
        .unwrap();
        let moved = |v: &Vec<f64>| vec![v[0] + shift[0], v[1] + shift[1]];
        let shifted = spherical_log_likelihood(
            &CoefSet::from_rows(rows.iter().map(moved).collect(), 2).unwrap(),
            &MeanModel::new(means.iter().map(moved).collect(), 0.7, 0.0).unwrap(),
        )
        .unwrap();
        assert!((base - shifted).abs() < 1e-9);
        let permuted = spherical_log_likelihood(
            &CoefSet::from_rows(rows, 2).unwrap(),
            &MeanModel::new(vec![means[2].clone(), means[0].clone(), means[1].clone()], 0.7, 0.0)
                .unwrap(),
        )
        .unwrap();
        assert!((base - permuted).abs() < 1e-12);
    }

    #[test]
    fn lexicographic_sort_reports_permutation() {
        let mut model =
            MeanModel::new(vec![vec![1.0, 0.0], vec![0.0, 5.0], vec![0.0, -1.0]], 1.0, 0.0).unwrap();
        let perm = model.sort_lexicographic();
        assert_eq!(model.means(), &[vec![0.0, -1.0], vec![0.0, 5.0], vec![1.0, 0.0]]);
        assert_eq!(perm, vec![2, 1, 0]);
        assert!(model.is_lexicographic());
    }

    fn gaussian_blobs(centers: &[Vec<f64>], per: usize, sd: f64, seed: u64) -> CoefSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = centers[0].len();
        let mut rows = Vec::new();
        for i in 0..per {
            for c in centers {
                let _ = i;
                rows.push(
                    c.iter()
                        .map(|m| m + sd * rng.sample::<f64, _>(StandardNormal))
                        .collect(),
                );
            }
        }
        CoefSet::from_rows(rows, d).unwrap()
    }

    #[test]
    fn em_single_component_is_closed_form() {
        let data = gaussian_blobs(&[vec![1.0, -1.0, 0.5]], 200, 0.7, 4);
        let fit = fit_gmm_em(&data, 1, 9, 50, None).unwrap();
        let mean = column_means(&data);
        let cov = weighted_covariance(&data, &vec![1.0; data.n()], &mean);
        for (a, b) in fit.params.mean(0).iter().zip(&mean) {
            assert!((a - b).abs() < 1e-8);
        }
        let expected = cov + DMatrix::identity(3, 3) * fit.ridge;
        assert!((&fit.params.covariances()[0] - expected).amax() < 1e-8);
    }

    #[test]
    fn em_is_monotone_and_recovers_two_blobs() {
        let data = gaussian_blobs(&[vec![-5.0, -5.0], vec![5.0, 5.0]], 300, 1.0, 21);
        let fit = fit_gmm_em(&data, 2, 3, 200, None).unwrap();
        for w in fit.loglik_history.windows(2) {
            assert!(w[1] >= w[0] - 1e-8, "{} then {}", w[0], w[1]);
        }
        let mut means = fit.params.means();
        means.sort_by(|a, b| lexicographic(a, b));
        for (m, truth) in means.iter().zip([-5.0, 5.0]) {
            assert!(m.iter().all(|v| (v - truth).abs() < 0.1), "{m:?}");
        }
        for w in fit.params.weights() {
            assert!((w - 0.5).abs() < 0.05);
        }
    }

    #[test]
    fn em_monotone_on_unstructured_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let rows: Vec<Vec<f64>> = (0..150)
            .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let data = CoefSet::from_rows(rows, 3).unwrap();
        let fit = fit_gmm_em(&data, 4, 1, 300, None).unwrap();
        for w in fit.loglik_history.windows(2) {
            assert!(w[1] >= w[0] - 1e-8);
        }
    }

    #[test]
    fn em_errors() {
        let data = CoefSet::from_rows(vec![vec![1.0, 2.0]; 5], 2).unwrap();
        assert!(matches!(fit_gmm_em(&data, 2, 0, 10, None), Err(Error::IdenticalData)));
        assert!(matches!(
            fit_gmm_em(&data, 5, 0, 10, None),
            Err(Error::TooFewObservations { .. })
        ));
    }

    #[test]
    fn remark_seven_equivalence() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let means: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let model = MeanModel::new(means.clone(), 1.0, 0.0).unwrap();
        for lambda in [0.01, 1.0, 250.0] {
            let gmm = GmmParams::spherical(means.clone(), lambda).unwrap();
            for _ in 0..200 {
                let b: Vec<f64> = (0..3).map(|_| rng.random_range(-3.0..3.0)).collect();
                assert_eq!(bayes_allocate(&b, &gmm).unwrap(), kmeans_allocate(&b, &model));
            }
        }
    }
}
