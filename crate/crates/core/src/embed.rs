//! Exact (quadratic) t-distributed stochastic neighbor embedding, used to
//! project latent features to 2-D for the cluster scatter plot. Fully
//! seeded: the same features and seed give bit-identical coordinates.

use log::warn;
use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::util::derive_seed;

#[derive(Debug, Clone)]
pub struct TsneConfig {
    /// Target perplexity of the conditional distributions; clamped to
    /// `(n - 1) / 3` for small inputs.
    pub perplexity: f64,
    pub iters: usize,
    /// Iterations with early exaggeration applied (the first ones).
    pub exaggeration_iters: usize,
    pub exaggeration: f64,
    /// Gradient step size; `None` picks `max(n / exaggeration, 50)`, which
    /// keeps small embeddings from overshooting while still moving large
    /// ones. A fixed rate tuned for thousands of points tears a few dozen
    /// points apart instead of arranging them.
    pub learning_rate: Option<f64>,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig {
            perplexity: 30.0,
            iters: 500,
            exaggeration_iters: 250,
            exaggeration: 12.0,
            learning_rate: None,
            seed: 0,
        }
    }
}

/// Squared Euclidean distance matrix.
fn pairwise_sq(features: ArrayView2<'_, f64>) -> Array2<f64> {
    let n = features.nrows();
    let mut d = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let mut acc = 0.0;
            for k in 0..features.ncols() {
                let diff = features[[i, k]] - features[[j, k]];
                acc += diff * diff;
            }
            d[[i, j]] = acc;
            d[[j, i]] = acc;
        }
    }
    d
}

/// Row-stochastic conditional affinities whose entropy matches the target
/// perplexity, found by a per-row binary search over the precision.
fn conditional_affinities(d: &Array2<f64>, perplexity: f64) -> Array2<f64> {
    let n = d.nrows();
    let target_h = perplexity.ln();
    let mut p = Array2::<f64>::zeros((n, n));
    let mut row = vec![0.0; n];
    for i in 0..n {
        let mut beta = 1.0f64;
        let mut beta_min = f64::NEG_INFINITY;
        let mut beta_max = f64::INFINITY;
        // Shift by the smallest distance for exp stability.
        let base = (0..n)
            .filter(|&j| j != i)
            .map(|j| d[[i, j]])
            .fold(f64::INFINITY, f64::min);
        for _ in 0..64 {
            let mut total = 0.0;
            for (j, r) in row.iter_mut().enumerate() {
                *r = if j == i {
                    0.0
                } else {
                    (-beta * (d[[i, j]] - base)).exp()
                };
                total += *r;
            }
            // Entropy of the normalised row.
            let mut h = 0.0;
            for &r in row.iter() {
                if r > 0.0 {
                    let q = r / total;
                    h -= q * q.ln();
                }
            }
            let diff = h - target_h;
            if diff.abs() < 1e-5 {
                break;
            }
            if diff > 0.0 {
                beta_min = beta;
                beta = if beta_max.is_finite() {
                    0.5 * (beta + beta_max)
                } else {
                    beta * 2.0
                };
            } else {
                beta_max = beta;
                beta = if beta_min.is_finite() {
                    0.5 * (beta + beta_min)
                } else {
                    beta * 0.5
                };
            }
            if total == 0.0 {
                break;
            }
        }
        let total: f64 = row.iter().sum();
        if total > 0.0 {
            for j in 0..n {
                p[[i, j]] = row[j] / total;
            }
        } else {
            // Degenerate row (all neighbors coincide): fall back to uniform.
            for j in 0..n {
                p[[i, j]] = if j == i { 0.0 } else { 1.0 / (n - 1) as f64 };
            }
        }
    }
    p
}

/// Embed `features` into 2-D. Needs at least 10 points; identical features
/// are tolerated with a warning (the result is a single blob).
pub fn tsne(features: ArrayView2<'_, f64>, cfg: &TsneConfig) -> Result<Array2<f64>> {
    let n = features.nrows();
    if n < 10 {
        return Err(Error::InvalidArg(format!(
            "t-SNE needs at least 10 points, got {n}"
        )));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(
            "t-SNE input contains non-finite values".into(),
        ));
    }
    let d = pairwise_sq(features);
    let max_d = d.iter().fold(0.0f64, |a, &b| a.max(b));
    if max_d == 0.0 {
        warn!("all t-SNE inputs coincide; the embedding will be one blob");
    }
    let perplexity = cfg.perplexity.min((n - 1) as f64 / 3.0).max(2.0);
    let cond = conditional_affinities(&d, perplexity);

    // Symmetrise and floor.
    let mut p = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            p[[i, j]] = ((cond[[i, j]] + cond[[j, i]]) / (2.0 * n as f64)).max(1e-12);
        }
        p[[i, i]] = 1e-12;
    }

    let learning_rate = cfg
        .learning_rate
        .unwrap_or_else(|| (n as f64 / cfg.exaggeration).max(50.0));

    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(cfg.seed, "tsne-init"));
    let mut y = Array2::<f64>::from_shape_fn((n, 2), |_| rng.random_range(-1e-2..1e-2));
    let mut velocity = Array2::<f64>::zeros((n, 2));
    let mut gains = Array2::<f64>::from_elem((n, 2), 1.0);

    let mut q_w = Array2::<f64>::zeros((n, n));
    for iter in 0..cfg.iters {
        let exaggerate = if iter < cfg.exaggeration_iters {
            cfg.exaggeration
        } else {
            1.0
        };
        let momentum = if iter < cfg.exaggeration_iters {
            0.5
        } else {
            0.8
        };

        // Student-t weights and their normaliser.
        let mut z = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                let dy0 = y[[i, 0]] - y[[j, 0]];
                let dy1 = y[[i, 1]] - y[[j, 1]];
                let w = 1.0 / (1.0 + dy0 * dy0 + dy1 * dy1);
                q_w[[i, j]] = w;
                q_w[[j, i]] = w;
                z += 2.0 * w;
            }
        }
        let z = z.max(1e-12);

        // All gradients are taken at the frozen iterate, then applied in one
        // synchronous step; updating points in place would mix stale Student-t
        // weights with already-moved neighbors.
        let mut grad = Array2::<f64>::zeros((n, 2));
        for i in 0..n {
            let mut g0 = 0.0;
            let mut g1 = 0.0;
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w = q_w[[i, j]];
                let q = (w / z).max(1e-12);
                let coeff = 4.0 * (exaggerate * p[[i, j]] - q) * w;
                g0 += coeff * (y[[i, 0]] - y[[j, 0]]);
                g1 += coeff * (y[[i, 1]] - y[[j, 1]]);
            }
            grad[[i, 0]] = g0;
            grad[[i, 1]] = g1;
        }
        for i in 0..n {
            for dim in 0..2 {
                let g = grad[[i, dim]];
                // Standard adaptive gains.
                let same_sign = g.signum() == velocity[[i, dim]].signum();
                let gain = &mut gains[[i, dim]];
                *gain = if same_sign {
                    (*gain * 0.8).max(0.01)
                } else {
                    *gain + 0.2
                };
                velocity[[i, dim]] = momentum * velocity[[i, dim]] - learning_rate * *gain * g;
                y[[i, dim]] += velocity[[i, dim]];
            }
        }

        // Keep the embedding centred so coordinates stay comparable.
        for dim in 0..2 {
            let mean = y.column(dim).mean().unwrap();
            y.column_mut(dim).mapv_inplace(|v| v - mean);
        }
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(
            "t-SNE diverged to non-finite coordinates".into(),
        ));
    }
    Ok(y)
}
