//! Classical clustering baselines on flattened spectrograms: k-means with
//! k-means++ seeding and restarts, and expectation-maximisation for a
//! diagonal-covariance Gaussian mixture initialised from k-means.

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::util::{derive_seed, logsumexp};

#[derive(Debug, Clone)]
pub struct KMeansConfig {
    pub k: usize,
    /// Independent k-means++ initialisations; the lowest-inertia run wins.
    pub restarts: usize,
    pub max_iters: usize,
    /// Stop a run once inertia improves by less than this (relative).
    pub tol: f64,
    pub seed: u64,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        KMeansConfig {
            k,
            restarts: 10,
            max_iters: 300,
            tol: 1e-6,
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct KMeansResult {
    /// `k x d` cluster centres.
    pub centroids: Array2<f64>,
    pub labels: Vec<usize>,
    /// Sum of squared distances to the nearest centroid.
    pub inertia: f64,
    /// Inertia after each Lloyd iteration of the winning restart.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest-centroid labels; ties go to the lowest centroid index.
pub fn kmeans_assign(centroids: ArrayView2<f64>, data: ArrayView2<f64>) -> Vec<usize> {
    data.rows()
        .into_iter()
        .map(|row| {
            let x = row.as_slice().unwrap();
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (c, cent) in centroids.rows().into_iter().enumerate() {
                let d = sq_dist(x, cent.as_slice().unwrap());
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// k-means++ seeding: first centre uniform, each further centre drawn with
/// probability proportional to squared distance from the chosen set.
fn kmeans_pp_init(data: ArrayView2<f64>, k: usize, rng: &mut ChaCha12Rng) -> Array2<f64> {
    let (n, d) = data.dim();
    let mut centroids = Array2::<f64>::zeros((k, d));
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&data.row(first));

    let mut nearest: Vec<f64> = (0..n)
        .map(|i| {
            sq_dist(
                data.row(i).as_slice().unwrap(),
                centroids.row(0).as_slice().unwrap(),
            )
        })
        .collect();

    for c in 1..k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &w) in nearest.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            // All points coincide with the chosen set; any point works.
            rng.random_range(0..n)
        };
        centroids.row_mut(c).assign(&data.row(pick));
        for (i, near) in nearest.iter_mut().enumerate() {
            let d_new = sq_dist(
                data.row(i).as_slice().unwrap(),
                centroids.row(c).as_slice().unwrap(),
            );
            if d_new < *near {
                *near = d_new;
            }
        }
    }
    centroids
}

fn lloyd(
    data: ArrayView2<f64>,
    mut centroids: Array2<f64>,
    cfg: &KMeansConfig,
) -> (Array2<f64>, Vec<usize>, f64, Vec<f64>, usize) {
    let (n, d) = data.dim();
    let k = cfg.k;
    let mut labels = vec![0usize; n];
    let mut history = Vec::new();
    let mut prev_inertia = f64::INFINITY;
    let mut iters = 0;

    for _ in 0..cfg.max_iters {
        iters += 1;
        // Assignment step.
        let mut inertia = 0.0;
        for (i, label) in labels.iter_mut().enumerate() {
            let x = data.row(i);
            let xs = x.as_slice().unwrap();
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for c in 0..k {
                let dist = sq_dist(xs, centroids.row(c).as_slice().unwrap());
                if dist < best_d {
                    best_d = dist;
                    best = c;
                }
            }
            *label = best;
            inertia += best_d;
        }
        history.push(inertia);

        // Update step.
        let mut sums = Array2::<f64>::zeros((k, d));
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[labels[i]] += 1;
            let mut row = sums.row_mut(labels[i]);
            row += &data.row(i);
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Re-seed an empty cluster at the point farthest from its
                // current centroid, the standard repair.
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = sq_dist(
                            data.row(a).as_slice().unwrap(),
                            centroids.row(labels[a]).as_slice().unwrap(),
                        );
                        let db = sq_dist(
                            data.row(b).as_slice().unwrap(),
                            centroids.row(labels[b]).as_slice().unwrap(),
                        );
                        da.total_cmp(&db)
                    })
                    .unwrap();
                centroids.row_mut(c).assign(&data.row(far));
                labels[far] = c;
            } else {
                let mut row = centroids.row_mut(c);
                row.assign(&sums.row(c));
                row /= counts[c] as f64;
            }
        }

        if (prev_inertia - inertia).abs() <= cfg.tol * inertia.max(1.0) {
            break;
        }
        prev_inertia = inertia;
    }

    // Final assignment against the last centroid update.
    let labels = kmeans_assign(centroids.view(), data);
    let inertia = labels
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            sq_dist(
                data.row(i).as_slice().unwrap(),
                centroids.row(c).as_slice().unwrap(),
            )
        })
        .sum();
    (centroids, labels, inertia, history, iters)
}

/// Fit k-means with restarts; identical inputs and seed give identical output.
pub fn kmeans_fit(data: ArrayView2<f64>, cfg: &KMeansConfig) -> Result<KMeansResult> {
    let (n, _) = data.dim();
    if cfg.k == 0 {
        return Err(Error::InvalidArg("k must be positive".into()));
    }
    if n < cfg.k {
        return Err(Error::InvalidArg(format!(
            "cannot form {} clusters from {n} samples",
            cfg.k
        )));
    }
    if cfg.restarts == 0 {
        return Err(Error::InvalidArg("need at least one restart".into()));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("k-means input".into()));
    }

    let mut best: Option<KMeansResult> = None;
    for r in 0..cfg.restarts {
        let mut rng =
            ChaCha12Rng::seed_from_u64(derive_seed(cfg.seed, &format!("kmeans-restart-{r}")));
        let init = kmeans_pp_init(data, cfg.k, &mut rng);
        let (centroids, labels, inertia, history, iters) = lloyd(data, init, cfg);
        if best.as_ref().is_none_or(|b| inertia < b.inertia) {
            best = Some(KMeansResult {
                centroids,
                labels,
                inertia,
                inertia_history: history,
                iterations: iters,
            });
        }
    }
    Ok(best.unwrap())
}

#[derive(Debug, Clone)]
pub struct GmmConfig {
    pub k: usize,
    pub max_iters: usize,
    /// Stop once the mean log-likelihood improves by less than this.
    pub tol: f64,
    /// Lower bound applied to every variance after each M-step.
    pub var_floor: f64,
    pub seed: u64,
}

impl GmmConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        GmmConfig {
            k,
            max_iters: 200,
            tol: 1e-7,
            var_floor: 1e-6,
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GmmEmResult {
    /// Mixing weights, summing to 1.
    pub weights: Vec<f64>,
    /// `k x d` component means.
    pub means: Array2<f64>,
    /// `k x d` diagonal variances, each at least the configured floor.
    pub variances: Array2<f64>,
    /// Hard labels: argmax responsibility per sample.
    pub labels: Vec<usize>,
    /// Final mean per-sample log-likelihood.
    pub log_likelihood: f64,
    /// Mean log-likelihood after each EM iteration.
    pub ll_history: Vec<f64>,
    pub iterations: usize,
}

/// Log-density of each sample under each component plus the log-weight:
/// `out[n][k] = log pi_k + log N(x_n; mu_k, diag sigma2_k)`.
fn log_joint(
    data: ArrayView2<f64>,
    weights: &[f64],
    means: &Array2<f64>,
    variances: &Array2<f64>,
) -> Array2<f64> {
    let (n, d) = data.dim();
    let k = weights.len();
    let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    let mut out = Array2::<f64>::zeros((n, k));
    for c in 0..k {
        let log_w = weights[c].ln();
        let mu = means.row(c);
        let var = variances.row(c);
        // Precompute the normalising constant for this component.
        let log_norm: f64 = var.iter().map(|&v| -0.5 * v.ln() - half_log_2pi).sum();
        for i in 0..n {
            let mut quad = 0.0;
            for j in 0..d {
                let diff = data[[i, j]] - mu[j];
                quad += diff * diff / var[j];
            }
            out[[i, c]] = log_w + log_norm - 0.5 * quad;
        }
    }
    out
}

/// Hard component assignment under a fitted mixture; ties go to the lowest
/// component index.
pub fn gmm_assign(
    data: ArrayView2<f64>,
    weights: &[f64],
    means: &Array2<f64>,
    variances: &Array2<f64>,
) -> Vec<usize> {
    let joint = log_joint(data, weights, means, variances);
    joint
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0usize;
            let mut best_v = f64::NEG_INFINITY;
            for (c, &v) in row.iter().enumerate() {
                if v > best_v {
                    best_v = v;
                    best = c;
                }
            }
            best
        })
        .collect()
}

impl GmmEmResult {
    pub fn predict(&self, data: ArrayView2<f64>) -> Vec<usize> {
        gmm_assign(data, &self.weights, &self.means, &self.variances)
    }
}

/// Fit a diagonal-covariance Gaussian mixture by EM, initialised from a
/// k-means fit with the same seed.
pub fn gmm_em_fit(data: ArrayView2<f64>, cfg: &GmmConfig) -> Result<GmmEmResult> {
    let (n, d) = data.dim();
    let k = cfg.k;
    if k == 0 || n < k {
        return Err(Error::InvalidArg(format!(
            "cannot fit {k} components to {n} samples"
        )));
    }
    if cfg.var_floor <= 0.0 {
        return Err(Error::InvalidArg("variance floor must be positive".into()));
    }

    // Initialise from k-means.
    let km = kmeans_fit(
        data,
        &KMeansConfig::new(k, derive_seed(cfg.seed, "gmm-init")),
    )?;
    let mut means = km.centroids;
    let mut weights = vec![0.0f64; k];
    let mut variances = Array2::<f64>::zeros((k, d));
    {
        let mut counts = vec![0usize; k];
        for (i, &c) in km.labels.iter().enumerate() {
            counts[c] += 1;
            for j in 0..d {
                let diff = data[[i, j]] - means[[c, j]];
                variances[[c, j]] += diff * diff;
            }
        }
        for c in 0..k {
            // k-means repairs empty clusters, so every count is >= 1.
            weights[c] = counts[c] as f64 / n as f64;
            for j in 0..d {
                variances[[c, j]] = (variances[[c, j]] / counts[c] as f64).max(cfg.var_floor);
            }
            weights[c] = weights[c].max(1e-10);
        }
        let wsum: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= wsum);
    }

    let mut ll_history = Vec::new();
    let mut prev_ll = f64::NEG_INFINITY;
    let mut resp = Array2::<f64>::zeros((n, k));
    let mut iters = 0;

    for _ in 0..cfg.max_iters {
        iters += 1;
        // E-step in log space.
        let joint = log_joint(data, &weights, &means, &variances);
        let mut ll = 0.0;
        for i in 0..n {
            let row = joint.row(i);
            let lse = logsumexp(row.as_slice().unwrap());
            ll += lse;
            for c in 0..k {
                resp[[i, c]] = (joint[[i, c]] - lse).exp();
            }
        }
        let ll = ll / n as f64;
        if !ll.is_finite() {
            return Err(Error::NonFinite("EM log-likelihood".into()));
        }
        ll_history.push(ll);

        // M-step.
        for c in 0..k {
            let nk: f64 = (0..n).map(|i| resp[[i, c]]).sum();
            let nk_safe = nk.max(1e-12);
            weights[c] = nk / n as f64;
            for j in 0..d {
                let mut m = 0.0;
                for i in 0..n {
                    m += resp[[i, c]] * data[[i, j]];
                }
                means[[c, j]] = m / nk_safe;
            }
            for j in 0..d {
                let mut v = 0.0;
                for i in 0..n {
                    let diff = data[[i, j]] - means[[c, j]];
                    v += resp[[i, c]] * diff * diff;
                }
                variances[[c, j]] = (v / nk_safe).max(cfg.var_floor);
            }
            weights[c] = weights[c].max(1e-10);
        }
        let wsum: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= wsum);

        if (ll - prev_ll).abs() < cfg.tol {
            break;
        }
        prev_ll = ll;
    }

    let labels = gmm_assign(data, &weights, &means, &variances);
    let log_likelihood = *ll_history.last().unwrap();
    Ok(GmmEmResult {
        weights,
        means,
        variances,
        labels,
        log_likelihood,
        ll_history,
        iterations: iters,
    })
}
