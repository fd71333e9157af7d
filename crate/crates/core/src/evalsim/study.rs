//! Replicated clustering studies scored by adjusted Rand index.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use super::ari::adjusted_rand_index;
use super::simulate::{generator_basis, simulate_study, SimConfig, Study, K_TRUE};
use crate::basis::DesignMatrix;
use crate::error::{Error, Result};
use crate::mixtures::{bayes_allocate, fit_gmm_em_restarts};
use crate::rng;
use crate::tclust::{allocate_all, trimmed_kmeans, TrimSpec, DEFAULT_MAX_ITER};

/// Starts for every trimmed k-means rule in the studies. Heavily trimmed
/// fits from random points fall into class-merging optima often enough that
/// the library default of 20 is too few at `alpha = 0.5`.
pub const STUDY_RESTARTS: usize = 100;
/// EM starts for the mixture rule.
pub const GMM_RESTARTS: usize = 5;
pub const GMM_MAX_ITER: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    /// Full-covariance mixture fitted by EM, Bayes allocation.
    Gmm,
    /// Trimmed k-means means, nearest-mean allocation of every curve. A trim
    /// fraction of 0 is plain k-means.
    TrimmedKMeans { alpha: f64 },
}

impl Method {
    /// The four rules compared in the studies.
    pub fn standard() -> Vec<Method> {
        vec![
            Method::Gmm,
            Method::TrimmedKMeans { alpha: 0.0 },
            Method::TrimmedKMeans { alpha: 0.25 },
            Method::TrimmedKMeans { alpha: 0.5 },
        ]
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Gmm => "gmm",
            Method::TrimmedKMeans { alpha } if alpha == 0.0 => "kmeans",
            Method::TrimmedKMeans { .. } => "tkmeans",
        }
    }

    pub fn alpha(self) -> f64 {
        match self {
            Method::Gmm => 0.0,
            Method::TrimmedKMeans { alpha } => alpha,
        }
    }
}

/// One `(m, n)` combination of a study, with the generator's noise settings.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyCell {
    pub study: Study,
    pub m: usize,
    pub n: usize,
    /// Overrides the generator defaults (noise, covariance); `seed` is
    /// ignored because every replicate derives its own.
    pub template: Option<SimConfig>,
}

impl StudyCell {
    pub fn new(study: Study, m: usize, n: usize) -> Self {
        Self {
            study,
            m,
            n,
            template: None,
        }
    }

    fn config(&self, seed: u64) -> SimConfig {
        match &self.template {
            Some(t) => SimConfig {
                study: self.study,
                m: self.m,
                n: self.n,
                seed,
                ..t.clone()
            },
            None => SimConfig::new(self.study, self.n, self.m, seed),
        }
    }
}

/// One `(cell, method)` line of a report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyRow {
    pub study: &'static str,
    pub m: usize,
    pub n: usize,
    pub method: &'static str,
    pub alpha: f64,
    pub ari_mean: f64,
    /// Sample standard deviation over replicates divided by their root count.
    pub ari_se: f64,
    /// Mean fitting and allocation time per replicate.
    pub seconds: f64,
    #[serde(skip)]
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyReport {
    pub replicates: usize,
    pub rows: Vec<StudyRow>,
}

impl StudyReport {
    pub fn row(&self, study: Study, m: usize, n: usize, method: Method) -> Option<&StudyRow> {
        self.rows.iter().find(|r| {
            r.study == study.name()
                && r.m == m
                && r.n == n
                && r.method == method.name()
                && r.alpha == method.alpha()
        })
    }

    /// CSV with header `study,m,n,method,alpha,ari_mean,ari_se,seconds`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))
    }
}

/// Scores of every method on one simulated dataset, with timings.
pub fn run_replicate(cfg: &SimConfig, methods: &[Method]) -> Result<Vec<(f64, f64)>> {
    let data = simulate_study(cfg)?;
    let design = DesignMatrix::new(&generator_basis(), &data.grid)?;
    let coefs = design.fit_all(&data.series)?;
    methods
        .iter()
        .enumerate()
        .map(|(j, &method)| {
            let seed = rng::derive_key(cfg.seed, &[j as u64]);
            let start = Instant::now();
            let labels = match method {
                Method::Gmm => {
                    let fit =
                        fit_gmm_em_restarts(&coefs, K_TRUE, seed, GMM_RESTARTS, GMM_MAX_ITER, None)?;
                    coefs
                        .rows()
                        .map(|b| bayes_allocate(b, &fit.params))
                        .collect::<Result<Vec<_>>>()?
                }
                Method::TrimmedKMeans { alpha } => {
                    let fit = trimmed_kmeans(
                        &coefs,
                        K_TRUE,
                        TrimSpec::new(alpha)?,
                        STUDY_RESTARTS,
                        DEFAULT_MAX_ITER,
                        seed,
                    )?;
                    allocate_all(&coefs, &fit)?
                }
            };
            let seconds = start.elapsed().as_secs_f64();
            Ok((adjusted_rand_index(&data.labels, &labels)?, seconds))
        })
        .collect()
}

/// Runs every cell `replicates` times. Replicate data depend only on the
/// master seed, the study, `m`, `n` and the replicate index, so a cell's
/// numbers do not change when other cells are added.
pub fn run_study(
    cells: &[StudyCell],
    replicates: usize,
    methods: &[Method],
    seed: u64,
) -> Result<StudyReport> {
    if replicates == 0 {
        return Err(Error::InvalidConfig("replicates must be positive".into()));
    }
    if methods.is_empty() {
        return Err(Error::InvalidConfig("no methods requested".into()));
    }
    let jobs: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..replicates).map(move |r| (c, r)))
        .collect();
    let results: Vec<Vec<(f64, f64)>> = jobs
        .par_iter()
        .map(|&(c, r)| {
            let cell = &cells[c];
            let key = rng::derive_key(
                seed,
                &[
                    rng::TAG_STUDY,
                    cell.study as u64,
                    cell.m as u64,
                    cell.n as u64,
                    r as u64,
                ],
            );
            run_replicate(&cell.config(key), methods)
        })
        .collect::<Result<_>>()?;

    let mut rows = Vec::with_capacity(cells.len() * methods.len());
    for (c, cell) in cells.iter().enumerate() {
        let per_cell = &results[c * replicates..(c + 1) * replicates];
        for (j, &method) in methods.iter().enumerate() {
            let scores: Vec<f64> = per_cell.iter().map(|rep| rep[j].0).collect();
            let seconds = per_cell.iter().map(|rep| rep[j].1).sum::<f64>() / replicates as f64;
            let (mean, se) = mean_and_se(&scores);
            rows.push(StudyRow {
                study: cell.study.name(),
                m: cell.m,
                n: cell.n,
                method: method.name(),
                alpha: method.alpha(),
                ari_mean: mean,
                ari_se: se,
                seconds,
                scores,
            });
        }
    }
    Ok(StudyReport { replicates, rows })
}

/// Mean and standard error; the error is 0 for a single value.
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
