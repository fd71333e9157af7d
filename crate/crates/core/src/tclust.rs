//! Trimmed k-means: the trimmed classification objective, the
//! concentration step that (approximately) maximizes it, and multi-start
//! orchestration.
//!
//! With spherical components of common scale `lambda` and equal weights the
//! component score `log D_c(u) = -log k - d/2 log(2 pi lambda) - |u - mu_c|^2 / (2 lambda)`
//! is a decreasing function of the distance to `mu_c`, so every argmax over
//! scores is computed as an argmin over squared distances. This keeps the
//! retained set and the assignments independent of `lambda`.

use std::cmp::Ordering;
use std::f64::consts::PI;

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;

use crate::basis::CoefSet;
use crate::error::{Error, Result};
use crate::mixtures::{kmeans_allocate, MeanModel};
use crate::numeric::squared_distance;
use crate::rng;

/// Default number of concentration steps per restart.
pub const DEFAULT_MAX_ITER: usize = 20;
/// Default number of random restarts.
pub const DEFAULT_RESTARTS: usize = 20;

/// Trim fraction `alpha`; `floor(n (1 - alpha))` points are retained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrimSpec {
    alpha: f64,
}

impl TrimSpec {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&alpha) {
            return Err(Error::InvalidTrim(alpha));
        }
        Ok(Self { alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// `h = floor(n (1 - alpha))`. Products that land within rounding error
    /// of an integer are snapped to it, so `n = 10, alpha = 0.9` retains 1.
    pub fn retained(&self, n: usize) -> usize {
        let x = n as f64 * (1.0 - self.alpha);
        let nearest = x.round();
        let h = if (x - nearest).abs() <= 1e-9 * nearest.max(1.0) {
            nearest
        } else {
            x.floor()
        };
        (h as usize).min(n)
    }
}

/// `log D_c(u) = log(phi_d(u; mu_c, lambda I) / k)`.
pub fn component_log_score(u: &[f64], model: &MeanModel, c: usize) -> f64 {
    score_constant(model) - squared_distance(u, model.mean(c)) / (2.0 * model.lambda())
}

fn score_constant(model: &MeanModel) -> f64 {
    -(model.k() as f64).ln() - 0.5 * model.d() as f64 * (2.0 * PI * model.lambda()).ln()
}

/// One point's nearest mean and squared distance to it.
#[derive(Debug, Clone, Copy)]
struct Nearest {
    cluster: usize,
    dist: f64,
}

fn nearest_all(data: &CoefSet, model: &MeanModel) -> Vec<Nearest> {
    (0..data.n())
        .into_par_iter()
        .map(|i| {
            let u = data.row(i);
            let mut best = Nearest {
                cluster: 0,
                dist: f64::INFINITY,
            };
            for (c, m) in model.means().iter().enumerate() {
                let dist = squared_distance(u, m);
                if dist < best.dist {
                    best = Nearest { cluster: c, dist };
                }
            }
            best
        })
        .collect()
}

/// Flags the `h` points with the best scores (smallest nearest-mean
/// distance). Ties at the boundary go to the lower point index.
fn retain_best(nearest: &[Nearest], h: usize) -> Vec<bool> {
    let n = nearest.len();
    let mut keep = vec![true; n];
    if h >= n {
        return keep;
    }
    let by_fit = |a: &usize, b: &usize| -> Ordering {
        nearest[*a]
            .dist
            .total_cmp(&nearest[*b].dist)
            .then(a.cmp(b))
    };
    let mut order: Vec<usize> = (0..n).collect();
    if h > 0 {
        order.select_nth_unstable_by(h - 1, by_fit);
    }
    for &i in &order[h..] {
        keep[i] = false;
    }
    if h == 0 {
        keep.iter_mut().for_each(|k| *k = false);
    }
    keep
}

fn objective_from(nearest: &[Nearest], retained: &[bool], model: &MeanModel) -> f64 {
    let constant = score_constant(model);
    let two_lambda = 2.0 * model.lambda();
    let total: f64 = nearest
        .iter()
        .zip(retained)
        .filter(|(_, keep)| **keep)
        .map(|(p, _)| constant - p.dist / two_lambda)
        .sum();
    total / nearest.len() as f64
}

fn check_dims(data: &CoefSet, model: &MeanModel) -> Result<()> {
    if data.d() != model.d() {
        return Err(Error::ShapeMismatch {
            what: "coefficient dimension",
            expected: model.d(),
            got: data.d(),
        });
    }
    Ok(())
}

/// The empirical trimmed objective: the mean over all `n` points of each
/// retained point's best log score, where the `n - h` worst-scoring points
/// contribute zero.
pub fn tclust_objective(data: &CoefSet, model: &MeanModel, trim: TrimSpec) -> Result<f64> {
    check_dims(data, model)?;
    let h = trim.retained(data.n());
    if h < 1 {
        return Err(Error::TrimTooSmall { h, k: 1 });
    }
    let nearest = nearest_all(data, model);
    let retained = retain_best(&nearest, h);
    Ok(objective_from(&nearest, &retained, model))
}

/// Retained set and partition computed from the means of iterate `r`.
#[derive(Debug, Clone, PartialEq)]
pub struct TclustState {
    pub iteration: usize,
    /// The means the scores were computed from.
    pub model: MeanModel,
    pub retained: Vec<bool>,
    /// Nearest mean of every point (trimmed points included).
    pub assignment: Vec<usize>,
    /// [`tclust_objective`] at `model`.
    pub objective: f64,
}

impl TclustState {
    /// Sizes of the retained clusters.
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.model.k()];
        for (c, keep) in self.assignment.iter().zip(&self.retained) {
            if *keep {
                sizes[*c] += 1;
            }
        }
        sizes
    }
}

/// One concentration step: score, retain the `h` best points, split them by
/// nearest mean, and move every mean to the centroid of its part. A part that
/// comes out empty is re-seeded at the worst-fitting retained point (the next
/// worst for a second empty part, and so on).
pub fn tclust_step(
    data: &CoefSet,
    model: &MeanModel,
    trim: TrimSpec,
) -> Result<(MeanModel, TclustState)> {
    check_dims(data, model)?;
    let k = model.k();
    let h = trim.retained(data.n());
    if h < k {
        return Err(Error::TrimTooSmall { h, k });
    }
    let nearest = nearest_all(data, model);
    let retained = retain_best(&nearest, h);
    let objective = objective_from(&nearest, &retained, model);

    let d = data.d();
    let mut sums = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for (i, (p, keep)) in nearest.iter().zip(&retained).enumerate() {
        if !*keep {
            continue;
        }
        counts[p.cluster] += 1;
        for (s, v) in sums[p.cluster].iter_mut().zip(data.row(i)) {
            *s += v;
        }
    }

    let mut next = model.clone();
    let mut worst_fit: Option<Vec<usize>> = None;
    let mut reseeded = 0;
    for (c, mean) in next.means_mut().iter_mut().enumerate() {
        if counts[c] > 0 {
            let count = counts[c] as f64;
            for (m, s) in mean.iter_mut().zip(&sums[c]) {
                *m = s / count;
            }
        } else {
            let worst = worst_fit.get_or_insert_with(|| {
                let mut idx: Vec<usize> = (0..nearest.len()).filter(|&i| retained[i]).collect();
                idx.sort_by(|&a, &b| nearest[b].dist.total_cmp(&nearest[a].dist).then(a.cmp(&b)));
                idx
            });
            let i = worst[reseeded % worst.len()];
            reseeded += 1;
            mean.copy_from_slice(data.row(i));
        }
    }

    let state = TclustState {
        iteration: 0,
        model: model.clone(),
        retained,
        assignment: nearest.iter().map(|p| p.cluster).collect(),
        objective,
    };
    Ok((next, state))
}

/// Result of a trimmed k-means fit.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterFit {
    pub model: MeanModel,
    /// Nearest mean of every point under the final means (0-based).
    pub labels: Vec<usize>,
    /// Points outside the retained set at the final means.
    pub trimmed: Vec<bool>,
    pub objective: f64,
    pub iterations: usize,
    /// Which restart produced this fit.
    pub restart: usize,
    /// Objective at the initial means and after every step.
    pub objective_history: Vec<f64>,
}

impl ClusterFit {
    pub fn trimmed_count(&self) -> usize {
        self.trimmed.iter().filter(|t| **t).count()
    }
}

/// Initial means of restart `restart`: `k` points drawn uniformly from the
/// restart's own random stream, with pairwise distinct values whenever the
/// data holds at least `k` distinct rows.
pub fn initial_means(
    data: &CoefSet,
    k: usize,
    lambda: f64,
    trim: TrimSpec,
    seed: u64,
    restart: usize,
) -> Result<MeanModel> {
    let n = data.n();
    if k == 0 || k > n {
        return Err(Error::TooFewObservations { n, k });
    }
    let mut rng = rng::stream(seed, &[rng::TAG_TCLUST_RESTART, restart as u64]);
    let first = index::sample(&mut rng, n, k).into_vec();
    let distinct = |picks: &[usize], i: usize| picks.iter().all(|&p| data.row(p) != data.row(i));
    let mut picks: Vec<usize> = Vec::with_capacity(k);
    for &i in &first {
        if distinct(&picks, i) {
            picks.push(i);
        }
    }
    // Repeated values: redraw a bounded number of times, then scan from a
    // random offset.
    for _ in 0..32 * k {
        if picks.len() == k {
            break;
        }
        let i = rng.random_range(0..n);
        if distinct(&picks, i) {
            picks.push(i);
        }
    }
    if picks.len() < k {
        let offset = rng.random_range(0..n);
        for i in (0..n).map(|j| (j + offset) % n) {
            if picks.len() == k {
                break;
            }
            if distinct(&picks, i) {
                picks.push(i);
            }
        }
    }
    // Fewer than k distinct rows: top up with the first draws.
    for &i in &first {
        if picks.len() == k {
            break;
        }
        if !picks.contains(&i) {
            picks.push(i);
        }
    }
    let means = picks.iter().map(|&i| data.row(i).to_vec()).collect();
    MeanModel::new(means, lambda, trim.alpha())
}

/// Iterates [`tclust_step`] from `init` until the retained set and the
/// assignments repeat, or `max_iter` steps have run. Means are left in the
/// order they were given.
pub fn refine(
    data: &CoefSet,
    init: MeanModel,
    trim: TrimSpec,
    max_iter: usize,
) -> Result<ClusterFit> {
    let mut model = init;
    let mut previous: Option<(Vec<bool>, Vec<usize>)> = None;
    let mut history = Vec::new();
    let mut iterations = 0;
    for _ in 0..max_iter {
        let (next, state) = tclust_step(data, &model, trim)?;
        if let Some(&last) = history.last() {
            debug_assert!(
                state.objective >= last - 1e-10,
                "trimmed objective decreased: {last} -> {}",
                state.objective
            );
        }
        history.push(state.objective);
        let key = (state.retained, state.assignment);
        if previous.as_ref() == Some(&key) {
            break;
        }
        previous = Some(key);
        model = next;
        iterations += 1;
    }

    let nearest = nearest_all(data, &model);
    let retained = retain_best(&nearest, trim.retained(data.n()));
    let objective = objective_from(&nearest, &retained, &model);
    if history.last() != Some(&objective) {
        history.push(objective);
    }
    Ok(ClusterFit {
        model,
        labels: nearest.iter().map(|p| p.cluster).collect(),
        trimmed: retained.iter().map(|k| !k).collect(),
        objective,
        iterations,
        restart: 0,
        objective_history: history,
    })
}

/// Multi-start trimmed k-means with `lambda = 1`.
pub fn trimmed_kmeans(
    data: &CoefSet,
    k: usize,
    trim: TrimSpec,
    restarts: usize,
    max_iter: usize,
    seed: u64,
) -> Result<ClusterFit> {
    trimmed_kmeans_with_scale(data, k, trim, restarts, max_iter, seed, 1.0)
}

/// Multi-start trimmed k-means. Restarts run in parallel on independent
/// streams; the one with the largest objective wins (ties to the earliest).
/// The winning means are sorted lexicographically and labels follow them.
pub fn trimmed_kmeans_with_scale(
    data: &CoefSet,
    k: usize,
    trim: TrimSpec,
    restarts: usize,
    max_iter: usize,
    seed: u64,
    lambda: f64,
) -> Result<ClusterFit> {
    let n = data.n();
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    if k == 0 {
        return Err(Error::InvalidConfig("k must be positive".into()));
    }
    let h = trim.retained(n);
    if k > h {
        return Err(Error::TrimTooSmall { h, k });
    }
    if restarts == 0 {
        return Err(Error::InvalidConfig("restarts must be positive".into()));
    }
    let fits: Vec<ClusterFit> = (0..restarts)
        .into_par_iter()
        .map(|r| {
            let init = initial_means(data, k, lambda, trim, seed, r)?;
            let mut fit = refine(data, init, trim, max_iter)?;
            fit.restart = r;
            Ok(fit)
        })
        .collect::<Result<_>>()?;

    let mut best = 0;
    for (r, fit) in fits.iter().enumerate() {
        if fit.objective > fits[best].objective {
            best = r;
        }
    }
    let mut fit = fits.into_iter().nth(best).expect("restarts > 0");
    let perm = fit.model.sort_lexicographic();
    fit.labels.iter_mut().for_each(|l| *l = perm[*l]);
    Ok(fit)
}

/// Nearest-mean label for every point, trimmed or not.
pub fn allocate_all(data: &CoefSet, fit: &ClusterFit) -> Result<Vec<usize>> {
    check_dims(data, &fit.model)?;
    Ok((0..data.n())
        .into_par_iter()
        .map(|i| kmeans_allocate(data.row(i), &fit.model))
        .collect())
}
