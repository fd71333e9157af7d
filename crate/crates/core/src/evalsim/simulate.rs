//! Generator for the two simulation studies: five classes of cubic B-spline
//! curves with ten basis functions on `[0, 1]`, observed with Gaussian noise.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::basis::{BasisSystem, CoefSet, DesignMatrix, SeriesMatrix, TimeGrid};
use crate::error::{Error, Result};
use crate::rng;

pub const K_TRUE: usize = 5;
pub const D_GEN: usize = 10;
pub const NOISE_SD: f64 = 0.25;
pub const COEF_VAR: f64 = 0.25 * 0.25;
/// Off-diagonal coefficient covariance of the correlated study.
pub const COEF_COV: f64 = 0.15 * 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Study {
    /// Independent coefficients.
    S1,
    /// Equicorrelated coefficients.
    S2,
}

impl Study {
    pub fn name(self) -> &'static str {
        match self {
            Study::S1 => "s1",
            Study::S2 => "s2",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub study: Study,
    pub n: usize,
    pub m: usize,
    /// Observation noise standard deviation.
    pub sigma: f64,
    /// Diagonal of the coefficient covariance.
    pub coef_var: f64,
    /// Off-diagonal of the coefficient covariance.
    pub coef_cov: f64,
    pub seed: u64,
}

impl SimConfig {
    pub fn new(study: Study, n: usize, m: usize, seed: u64) -> Self {
        Self {
            study,
            n,
            m,
            sigma: NOISE_SD,
            coef_var: COEF_VAR,
            coef_cov: match study {
                Study::S1 => 0.0,
                Study::S2 => COEF_COV,
            },
            seed,
        }
    }

    /// Noise-free curves with every coefficient vector at its class mean.
    pub fn noiseless(mut self) -> Self {
        self.sigma = 0.0;
        self.coef_var = 0.0;
        self.coef_cov = 0.0;
        self
    }

    pub fn coef_covariance(&self) -> DMatrix<f64> {
        DMatrix::from_fn(D_GEN, D_GEN, |r, c| {
            if r == c {
                self.coef_var
            } else {
                self.coef_cov
            }
        })
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 {
            return Err(Error::InvalidConfig("n and m must be positive".into()));
        }
        if !(self.sigma >= 0.0 && self.coef_var >= 0.0 && self.coef_cov >= 0.0) {
            return Err(Error::InvalidConfig("variances must be nonnegative".into()));
        }
        if self.coef_cov > self.coef_var {
            return Err(Error::InvalidConfig(
                "coefficient covariance must not exceed its variance".into(),
            ));
        }
        Ok(())
    }
}

/// Class means: zero, the first two coefficients at +-1, the last two at +-1.
pub fn class_means() -> Vec<Vec<f64>> {
    let mut means = vec![vec![0.0; D_GEN]; K_TRUE];
    means[1][..2].fill(1.0);
    means[2][..2].fill(-1.0);
    means[3][D_GEN - 2..].fill(1.0);
    means[4][D_GEN - 2..].fill(-1.0);
    means
}

/// The generating basis, also used for Stage 1 in the studies.
pub fn generator_basis() -> BasisSystem {
    BasisSystem::cubic(0.0, 1.0, D_GEN).expect("fixed valid basis")
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub grid: TimeGrid,
    pub series: SeriesMatrix,
    /// True class of every curve, `0..K_TRUE`.
    pub labels: Vec<usize>,
    /// Generating coefficient vectors.
    pub coefs: CoefSet,
}

/// Draws one dataset; fully determined by `cfg`.
pub fn simulate_study(cfg: &SimConfig) -> Result<LabeledDataset> {
    cfg.validate()?;
    let grid = TimeGrid::uniform(0.0, 1.0, cfg.m)?;
    let design = DesignMatrix::new(&generator_basis(), &grid)?;
    let x = design.matrix();
    let cov = cfg.coef_covariance();
    // The zero matrix has no Cholesky factor but needs none.
    let factor = if cov.iter().all(|v| *v == 0.0) {
        DMatrix::zeros(D_GEN, D_GEN)
    } else {
        cov.cholesky().ok_or(Error::NotPositiveDefinite)?.unpack()
    };
    let means = class_means();

    let mut rng = rng::stream(cfg.seed, &[rng::TAG_SIMULATE]);
    let mut labels = Vec::with_capacity(cfg.n);
    let mut coefs = Vec::with_capacity(cfg.n * D_GEN);
    let mut values = Vec::with_capacity(cfg.n * cfg.m);
    let mut z = vec![0.0; D_GEN];
    for _ in 0..cfg.n {
        let class = rng.random_range(0..K_TRUE);
        z.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
        let b: Vec<f64> = (0..D_GEN)
            .map(|r| means[class][r] + (0..=r).map(|c| factor[(r, c)] * z[c]).sum::<f64>())
            .collect();
        for j in 0..cfg.m {
            let clean: f64 = (0..D_GEN).map(|c| x[(j, c)] * b[c]).sum();
            let noise: f64 = rng.sample(StandardNormal);
            values.push(clean + cfg.sigma * noise);
        }
        labels.push(class);
        coefs.extend(b);
    }
    Ok(LabeledDataset {
        series: SeriesMatrix::new(cfg.n, cfg.m, values)?,
        coefs: CoefSet::new(cfg.n, D_GEN, coefs)?,
        grid,
        labels,
    })
}
