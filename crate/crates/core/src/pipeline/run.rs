//! The two-stage run on a volume: filter, sweep k, select, allocate, export.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::export::{ClusterVolume, MeanFunctions};
use super::normalize::{denormalize, normalize_columns};
use super::volume::{VolumeFormat, VolumeSeries};
use crate::basis::{BasisSystem, CoefSet, ColumnStats, DesignMatrix};
use crate::error::{Error, Result};
use crate::mixtures::{spherical_log_likelihood, MeanModel};
use crate::rng;
use crate::selection::{
    criterion_values, estimate_slope_ddse, select_k, Penalty, SelectionRecord, SelectionTrace,
    SlopeEstimate,
};
use crate::tclust::{allocate_all, trimmed_kmeans_with_scale, ClusterFit, TrimSpec};

fn default_d() -> usize {
    100
}
fn default_lambda() -> f64 {
    1.0
}
fn default_k_set() -> Vec<usize> {
    (2..=50).collect()
}
fn default_restarts() -> usize {
    crate::tclust::DEFAULT_RESTARTS
}
fn default_max_iter() -> usize {
    crate::tclust::DEFAULT_MAX_ITER
}
fn default_true() -> bool {
    true
}
fn default_penalty() -> Penalty {
    Penalty::Spherical
}

/// Settings of a volume run. Serialized field names are the JSON config keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Number of cubic B-spline basis functions.
    #[serde(default = "default_d")]
    pub d: usize,
    /// Common component variance.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Trim fraction.
    #[serde(default)]
    pub alpha: f64,
    /// Candidate cluster counts.
    #[serde(default = "default_k_set")]
    pub k_set: Vec<usize>,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub detrend: bool,
    #[serde(default = "default_true")]
    pub normalize: bool,
    #[serde(default = "default_penalty")]
    pub penalty: Penalty,
    /// Fixed slope; when absent it is estimated from the trace.
    #[serde(default)]
    pub kappa: Option<f64>,
    #[serde(default)]
    pub input: Option<PathBuf>,
    #[serde(default)]
    pub format: Option<VolumeFormat>,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("every field has a default")
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.into()));
        if self.d == 0 || self.restarts == 0 || self.max_iter == 0 {
            return bad("d, restarts and max_iter must be positive");
        }
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return bad("lambda must be positive");
        }
        TrimSpec::new(self.alpha)?;
        if self.k_set.is_empty() || self.k_set.contains(&0) {
            return bad("k_set must be a nonempty set of positive counts");
        }
        if self.k_set.windows(2).any(|w| w[0] >= w[1]) {
            return bad("k_set must be strictly increasing");
        }
        if let Some(kappa) = self.kappa {
            if !(kappa.is_finite() && kappa > 0.0) {
                return bad("kappa must be positive");
            }
        }
        Ok(())
    }
}

/// Stage-1 coefficients, normalized if requested.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub system: BasisSystem,
    pub coefs: CoefSet,
    pub stats: Option<ColumnStats>,
}

/// Detrends (if on), filters every voxel and normalizes columns (if on).
/// Normalization is skipped for single-voxel volumes.
pub fn prepare(vol: &VolumeSeries, cfg: &RunConfig) -> Result<Prepared> {
    cfg.validate()?;
    let grid = vol.grid();
    let system = BasisSystem::cubic(grid.first(), grid.last(), cfg.d)?;
    let design = DesignMatrix::new(&system, grid)?;
    let series = if cfg.detrend {
        vol.series().detrended(grid)?
    } else {
        vol.series().clone()
    };
    let raw = design.fit_all(&series)?;
    let (coefs, stats) = if cfg.normalize && raw.n() >= 2 {
        let (c, s) = normalize_columns(&raw)?;
        (c, Some(s))
    } else {
        (raw, None)
    };
    Ok(Prepared {
        system,
        coefs,
        stats,
    })
}

/// One fitted candidate.
#[derive(Debug, Clone)]
pub struct SweepFit {
    /// Candidate as requested.
    pub requested_k: usize,
    /// Cluster count actually fitted (at most the number of voxels).
    pub k: usize,
    /// Trim fraction actually used.
    pub alpha: f64,
    pub fit: ClusterFit,
}

#[derive(Debug, Clone)]
pub struct Sweep {
    pub trace: SelectionTrace,
    pub fits: Vec<SweepFit>,
}

/// Fits every candidate `k`. Candidates larger than the voxel count are
/// capped to it (and deduplicated), and trimming is switched off for any
/// candidate whose retained count would fall below `k`.
pub fn sweep(prepared: &Prepared, cfg: &RunConfig) -> Result<Sweep> {
    let data = &prepared.coefs;
    let n = data.n();
    let mut plan: Vec<(usize, usize, f64)> = Vec::new();
    for &requested in &cfg.k_set {
        let k = requested.min(n);
        if plan.last().is_some_and(|p| p.1 == k) {
            continue;
        }
        let alpha = if TrimSpec::new(cfg.alpha)?.retained(n) < k {
            0.0
        } else {
            cfg.alpha
        };
        plan.push((requested, k, alpha));
    }
    let fitted: Vec<(SweepFit, f64, f64)> = plan
        .par_iter()
        .map(|&(requested_k, k, alpha)| {
            let start = Instant::now();
            let fit = trimmed_kmeans_with_scale(
                data,
                k,
                TrimSpec::new(alpha)?,
                cfg.restarts,
                cfg.max_iter,
                rng::derive_key(cfg.seed, &[rng::TAG_SWEEP, k as u64]),
                cfg.lambda,
            )?;
            let loglik = spherical_log_likelihood(data, &fit.model)? / n as f64;
            let seconds = start.elapsed().as_secs_f64();
            Ok((
                SweepFit {
                    requested_k,
                    k,
                    alpha,
                    fit,
                },
                loglik,
                seconds,
            ))
        })
        .collect::<Result<_>>()?;
    let mut trace = SelectionTrace::default();
    let mut fits = Vec::with_capacity(fitted.len());
    for (sf, loglik, seconds) in fitted {
        trace.push(SelectionRecord {
            k: sf.k,
            loglik,
            pen: cfg.penalty.value(sf.k, data.d()),
            seconds,
        })?;
        fits.push(sf);
    }
    Ok(Sweep { trace, fits })
}

/// Where the slope used for selection came from.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "lowercase", tag = "source")]
pub enum SlopeSource {
    Estimated(SlopeEstimate),
    Configured { kappa: f64 },
    /// Only one candidate; nothing to select between.
    Single,
}

impl SlopeSource {
    pub fn kappa(&self) -> Option<f64> {
        match self {
            SlopeSource::Estimated(e) => Some(e.kappa),
            SlopeSource::Configured { kappa } => Some(*kappa),
            SlopeSource::Single => None,
        }
    }
}

/// Summary written next to the labels.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectionReport {
    pub k: usize,
    pub kappa: Option<f64>,
    pub penalty: Penalty,
    pub d: usize,
    pub n: usize,
    pub alpha: f64,
    pub trimmed: usize,
    /// `(k, -l_n/n + 2 kappa pen(k))` for every candidate.
    pub criterion: Vec<(usize, f64)>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub clusters: ClusterVolume,
    pub means: MeanFunctions,
    pub trace: SelectionTrace,
    pub slope: SlopeSource,
    pub report: SelectionReport,
    /// Per candidate, the fitted means on the original coefficient scale.
    pub models: Vec<(usize, Vec<Vec<f64>>)>,
}

/// Chooses the slope: configured value, else DDSE, unless only one candidate
/// exists.
pub fn choose_slope(trace: &SelectionTrace, kappa: Option<f64>) -> Result<SlopeSource> {
    if let Some(kappa) = kappa {
        return Ok(SlopeSource::Configured { kappa });
    }
    if trace.len() == 1 {
        return Ok(SlopeSource::Single);
    }
    estimate_slope_ddse(trace).map(SlopeSource::Estimated)
}

fn original_scale(model: &MeanModel, stats: Option<&ColumnStats>) -> Vec<Vec<f64>> {
    model
        .means()
        .iter()
        .map(|mu| match stats {
            Some(s) => denormalize(mu, s),
            None => mu.clone(),
        })
        .collect()
}

/// Selection, allocation and de-normalization after a sweep.
pub fn finish(
    vol: &VolumeSeries,
    prepared: &Prepared,
    sweep: &Sweep,
    slope: SlopeSource,
    cfg: &RunConfig,
) -> Result<RunOutput> {
    let k_hat = match slope.kappa() {
        Some(kappa) => select_k(&sweep.trace, kappa)?,
        None => sweep.trace.records()[0].k,
    };
    let chosen = sweep
        .fits
        .iter()
        .find(|f| f.k == k_hat)
        .expect("selected k comes from the trace");
    let labels = allocate_all(&prepared.coefs, &chosen.fit)?;
    let clusters = ClusterVolume::new(
        vol.dims(),
        k_hat,
        labels.iter().map(|l| l + 1).collect(),
        chosen.fit.trimmed.clone(),
    )?;
    let stats = prepared.stats.as_ref();
    let means = MeanFunctions::from_coefficients(
        &prepared.system,
        vol.grid(),
        &original_scale(&chosen.fit.model, stats),
    )?;
    let report = SelectionReport {
        k: k_hat,
        kappa: slope.kappa(),
        penalty: cfg.penalty,
        d: cfg.d,
        n: vol.n(),
        alpha: chosen.alpha,
        trimmed: clusters.trimmed_count(),
        criterion: slope
            .kappa()
            .map(|kappa| criterion_values(&sweep.trace, kappa))
            .unwrap_or_default(),
    };
    let models = sweep
        .fits
        .iter()
        .map(|f| (f.k, original_scale(&f.fit.model, stats)))
        .collect();
    Ok(RunOutput {
        clusters,
        means,
        trace: sweep.trace.clone(),
        slope,
        report,
        models,
    })
}

/// The whole run in memory.
pub fn run_two_stage(vol: &VolumeSeries, cfg: &RunConfig) -> Result<RunOutput> {
    let prepared = prepare(vol, cfg)?;
    let sweep = sweep(&prepared, cfg)?;
    let slope = choose_slope(&sweep.trace, cfg.kappa)?;
    finish(vol, &prepared, &sweep, slope, cfg)
}

/// File names inside the output directory.
pub mod files {
    pub const TRACE: &str = "trace.csv";
    pub const MODELS_DIR: &str = "models";
    pub const SLOPE: &str = "slope.json";
    pub const SELECTION: &str = "selection.json";
    pub const LABELS_CSV: &str = "labels.csv";
    pub const LABELS_CIVL: &str = "labels.civl";
    pub const MEAN_FUNCTIONS: &str = "mean_functions.csv";

    pub fn model(k: usize) -> String {
        format!("means_k{k}.csv")
    }
}

fn write_means(path: &Path, means: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let d = means.first().map_or(0, Vec::len);
    let mut header = vec!["cluster".to_string()];
    header.extend((1..=d).map(|j| format!("b{j}")));
    w.write_record(&header)?;
    for (c, mu) in means.iter().enumerate() {
        let mut record = vec![(c + 1).to_string()];
        record.extend(mu.iter().map(f64::to_string));
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Runs and writes every artifact into `out`. The trace and per-k means are
/// written before selection, so they survive a failed slope estimate; the
/// slope report then records the failure.
pub fn run_to_dir(vol: &VolumeSeries, cfg: &RunConfig, out: &Path) -> Result<RunOutput> {
    std::fs::create_dir_all(out.join(files::MODELS_DIR))?;
    let prepared = prepare(vol, cfg)?;
    let sweep = sweep(&prepared, cfg)?;
    sweep.trace.save(&out.join(files::TRACE))?;
    for f in &sweep.fits {
        write_means(
            &out.join(files::MODELS_DIR).join(files::model(f.k)),
            &original_scale(&f.fit.model, prepared.stats.as_ref()),
        )?;
    }
    let slope = match choose_slope(&sweep.trace, cfg.kappa) {
        Ok(s) => s,
        Err(e) => {
            write_json(
                &out.join(files::SLOPE),
                &serde_json::json!({ "source": "failed", "error": e.to_string() }),
            )?;
            return Err(e);
        }
    };
    write_json(&out.join(files::SLOPE), &slope)?;
    let output = finish(vol, &prepared, &sweep, slope, cfg)?;
    write_json(&out.join(files::SELECTION), &output.report)?;
    output.clusters.save_csv(&out.join(files::LABELS_CSV))?;
    output.clusters.save_civl(&out.join(files::LABELS_CIVL))?;
    output.means.save(&out.join(files::MEAN_FUNCTIONS))?;
    Ok(output)
}

/// Loads `path` in `format` and runs into `out`.
pub fn fit_file(path: &Path, format: VolumeFormat, cfg: &RunConfig, out: &Path) -> Result<RunOutput> {
    let vol = VolumeSeries::load(path, format)?;
    run_to_dir(&vol, cfg, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{SeriesMatrix, TimeGrid};
    use crate::pipeline::volume::Dims;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Two classes split along x, noisy sine and cosine curves.
    fn blocks(nx: usize, m: usize, noise: f64, seed: u64) -> (VolumeSeries, Vec<usize>) {
        let dims = Dims::new(nx, 3, 2);
        let grid = TimeGrid::uniform(0.0, 1.0, m).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = Vec::new();
        let mut truth = Vec::new();
        for i in 0..dims.len() {
            let class = usize::from(dims.coords(i).0 >= nx / 2);
            truth.push(class);
            for &t in grid.points() {
                let base = if class == 0 {
                    (6.0 * t).sin()
                } else {
                    2.0 * (6.0 * t).cos()
                };
                values.push(base + noise * (rng.random::<f64>() - 0.5));
            }
        }
        let series = SeriesMatrix::new(dims.len(), m, values).unwrap();
        (VolumeSeries::new(dims, grid, series).unwrap(), truth)
    }

    fn config(k_set: Vec<usize>) -> RunConfig {
        RunConfig {
            d: 8,
            k_set,
            restarts: 5,
            detrend: false,
            ..RunConfig::default()
        }
    }

    #[test]
    fn config_defaults_and_json() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.d, 100);
        assert_eq!(cfg.restarts, 20);
        assert_eq!(cfg.max_iter, 20);
        assert_eq!(cfg.k_set, (2..=50).collect::<Vec<_>>());
        assert!(cfg.detrend && cfg.normalize);
        let cfg = RunConfig::from_json(r#"{"d": 12, "alpha": 0.9, "penalty": "full", "kappa": 0.001}"#).unwrap();
        assert_eq!((cfg.d, cfg.alpha, cfg.penalty, cfg.kappa), (12, 0.9, Penalty::Full, Some(0.001)));
        assert!(RunConfig::from_json(r#"{"bogus": 1}"#).is_err());
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn config_validation() {
        for cfg in [
            RunConfig { alpha: 1.0, ..RunConfig::default() },
            RunConfig { k_set: vec![], ..RunConfig::default() },
            RunConfig { k_set: vec![3, 2], ..RunConfig::default() },
            RunConfig { kappa: Some(-1.0), ..RunConfig::default() },
            RunConfig { restarts: 0, ..RunConfig::default() },
        ] {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn single_voxel_runs_end_to_end() {
        let vol = VolumeSeries::new(
            Dims::new(1, 1, 1),
            TimeGrid::uniform(0.0, 1.0, 12).unwrap(),
            SeriesMatrix::new(1, 12, (0..12).map(|v| (v as f64).sin()).collect()).unwrap(),
        )
        .unwrap();
        let cfg = RunConfig {
            alpha: 0.5,
            ..config(vec![2])
        };
        let out = run_two_stage(&vol, &cfg).unwrap();
        assert_eq!(out.clusters.labels, vec![1]);
        assert_eq!(out.clusters.trimmed, vec![false]);
        assert_eq!(out.slope, SlopeSource::Single);
    }

    #[test]
    fn two_blocks_with_fixed_kappa() {
        let (vol, truth) = blocks(8, 40, 0.2, 1);
        let cfg = RunConfig {
            kappa: Some(0.05),
            ..config(vec![1, 2, 3])
        };
        let out = run_two_stage(&vol, &cfg).unwrap();
        assert_eq!(out.report.k, 2);
        let ari = crate::evalsim::adjusted_rand_index(&truth, &out.clusters.labels).unwrap();
        assert_eq!(ari, 1.0);
        assert_eq!(out.means.k(), 2);
        assert_eq!(out.models.len(), 3);
    }

    #[test]
    fn trimmed_count_is_exact() {
        let (vol, _) = blocks(8, 30, 0.2, 2);
        let cfg = RunConfig {
            alpha: 0.3,
            kappa: Some(1e-3),
            ..config(vec![2])
        };
        let out = run_two_stage(&vol, &cfg).unwrap();
        let n = vol.n();
        assert_eq!(out.clusters.trimmed_count(), n - TrimSpec::new(0.3).unwrap().retained(n));
    }

    #[test]
    fn normalization_is_neutral_for_untrimmed_fits() {
        let (vol, _) = blocks(10, 30, 0.5, 3);
        for normalize in [true, false] {
            let cfg = RunConfig {
                normalize,
                kappa: Some(1e-3),
                ..config(vec![2])
            };
            let prepared = prepare(&vol, &cfg).unwrap();
            let out = run_two_stage(&vol, &cfg).unwrap();
            // Average fitted curve of each cluster, from raw coefficients.
            let raw = DesignMatrix::new(&prepared.system, vol.grid())
                .unwrap()
                .fit_all(vol.series())
                .unwrap();
            for c in 0..2 {
                let members: Vec<usize> =
                    (0..vol.n()).filter(|&i| out.clusters.labels[i] == c + 1).collect();
                for (j, &t) in vol.grid().points().iter().enumerate() {
                    let avg = members
                        .iter()
                        .map(|&i| prepared.system.reconstruct(raw.row(i), t).unwrap())
                        .sum::<f64>()
                        / members.len() as f64;
                    assert!((out.means.curves[c][j] - avg).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn normalize_then_denormalize_matches_unnormalized_export() {
        let (vol, _) = blocks(8, 30, 0.3, 4);
        let base = RunConfig {
            kappa: Some(1e-3),
            ..config(vec![2])
        };
        let a = run_two_stage(&vol, &RunConfig { normalize: true, ..base.clone() }).unwrap();
        let b = run_two_stage(&vol, &RunConfig { normalize: false, ..base }).unwrap();
        assert_eq!(a.clusters.labels, b.clusters.labels);
        for (ca, cb) in a.means.curves.iter().zip(&b.means.curves) {
            for (x, y) in ca.iter().zip(cb) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn failed_slope_keeps_the_trace() {
        let (vol, _) = blocks(6, 20, 0.3, 5);
        let dir = tempfile::tempdir().unwrap();
        // Three candidates are too few for slope estimation.
        let err = run_to_dir(&vol, &config(vec![2, 3, 4]), dir.path()).unwrap_err();
        assert!(matches!(err, Error::TooFewCandidates { .. }));
        let trace = SelectionTrace::load(&dir.path().join(files::TRACE)).unwrap();
        assert_eq!(trace.ks(), vec![2, 3, 4]);
        assert!(dir.path().join(files::MODELS_DIR).join(files::model(3)).exists());
        let slope = std::fs::read_to_string(dir.path().join(files::SLOPE)).unwrap();
        assert!(slope.contains("failed"));
    }
}
