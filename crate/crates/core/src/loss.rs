//! The training objective: masked per-bin reconstruction likelihood plus an
//! approximate KL divergence between the diagonal-Gaussian posterior and
//! the mixture prior.
//!
//! The KL term has no closed form against a mixture, so it uses the bound
//! `D = -log sum_c pi_c exp(-KL(q || N_c))`, which is exact when the prior
//! collapses to a single component and non-negative in general (the log's
//! argument is a convex combination of values in `(0, 1]`). All gradients
//! here are hand-derived and pinned by finite-difference checks.

use ndarray::{Array1, Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{reparameterize, reparameterize_backward, GmmPrior, LatentGaussian, Model};
use crate::util::logsumexp;

/// Which per-bin reconstruction likelihood to train under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReconFamily {
    /// Binary cross-entropy against targets in `[0, 1]` — the default
    /// pairing for a sigmoid output layer.
    #[default]
    Bernoulli,
    /// Half squared error; available as a configuration switch.
    MeanSquared,
}

/// One objective evaluation, per-sample-scaled (sum over bins within a
/// sample, mean over the batch). `total = reconstruction + weight * kl`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub reconstruction: f64,
    pub kl: f64,
    pub total: f64,
}

fn check_recon_inputs(
    x: &Array4<f64>,
    x_hat: &Array4<f64>,
    mask: &Array2<f64>,
    family: ReconFamily,
) -> Result<()> {
    if x.dim() != x_hat.dim() {
        return Err(Error::Shape(format!(
            "target {:?} and prediction {:?} disagree",
            x.dim(),
            x_hat.dim()
        )));
    }
    let (n, c, _h, w) = x.dim();
    if c != 1 {
        return Err(Error::Shape(format!("expected one channel, got {c}")));
    }
    if mask.dim() != (n, w) {
        return Err(Error::Shape(format!(
            "mask {:?} does not cover batch {n} x frames {w}",
            mask.dim()
        )));
    }
    if mask.iter().any(|&m| m != 0.0 && m != 1.0) {
        return Err(Error::InvalidArg("mask entries must be 0 or 1".into()));
    }
    if x.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::InvalidArg(
            "reconstruction targets must lie in [0, 1]".into(),
        ));
    }
    if family == ReconFamily::Bernoulli && x_hat.iter().any(|&v| v <= 0.0 || v >= 1.0) {
        return Err(Error::InvalidArg(
            "Bernoulli predictions must lie strictly inside (0, 1)".into(),
        ));
    }
    Ok(())
}

/// `a * ln(b)` with the `0 * ln 0 := 0` convention.
fn xlogy(a: f64, b: f64) -> f64 {
    if a == 0.0 {
        0.0
    } else {
        a * b.ln()
    }
}

/// Masked reconstruction negative log-likelihood: frames whose mask bit is
/// zero are multiplied out of both target and prediction, which makes the
/// value exactly independent of their content; the survivors are summed
/// per sample and averaged over the batch.
pub fn reconstruction_nll(
    x: &Array4<f64>,
    x_hat: &Array4<f64>,
    mask: &Array2<f64>,
    family: ReconFamily,
) -> Result<f64> {
    check_recon_inputs(x, x_hat, mask, family)?;
    let (n, _, h, w) = x.dim();
    let mut total = 0.0;
    for i in 0..n {
        for t in 0..w {
            // A masked frame contributes -ln(1 - 0) = 0 per bin; skipping
            // it gives the identical sum without touching the content.
            if mask[[i, t]] == 0.0 {
                continue;
            }
            for row in 0..h {
                let target = x[[i, 0, row, t]];
                let pred = x_hat[[i, 0, row, t]];
                total += match family {
                    ReconFamily::Bernoulli => {
                        -(xlogy(target, pred) + xlogy(1.0 - target, 1.0 - pred))
                    }
                    ReconFamily::MeanSquared => 0.5 * (pred - target) * (pred - target),
                };
            }
        }
    }
    Ok(total / n as f64)
}

/// Gradient of [`reconstruction_nll`] with respect to the prediction
/// (masked-out bins get exactly zero).
pub fn reconstruction_nll_backward(
    x: &Array4<f64>,
    x_hat: &Array4<f64>,
    mask: &Array2<f64>,
    family: ReconFamily,
) -> Result<Array4<f64>> {
    check_recon_inputs(x, x_hat, mask, family)?;
    let (n, _, h, w) = x.dim();
    let scale = 1.0 / n as f64;
    let mut g = Array4::<f64>::zeros(x.dim());
    for i in 0..n {
        for t in 0..w {
            if mask[[i, t]] == 0.0 {
                continue;
            }
            for row in 0..h {
                let target = x[[i, 0, row, t]];
                let pred = x_hat[[i, 0, row, t]];
                g[[i, 0, row, t]] = scale
                    * match family {
                        ReconFamily::Bernoulli => -target / pred + (1.0 - target) / (1.0 - pred),
                        ReconFamily::MeanSquared => pred - target,
                    };
            }
        }
    }
    Ok(g)
}

fn check_latent_against_prior(latent: &LatentGaussian, prior: &GmmPrior) -> Result<()> {
    if latent.mean.dim() != latent.log_var.dim() {
        return Err(Error::Shape("posterior mean/log-var shape mismatch".into()));
    }
    if latent.mean.ncols() != prior.d_z() {
        return Err(Error::Shape(format!(
            "posterior dimension {} vs prior dimension {}",
            latent.mean.ncols(),
            prior.d_z()
        )));
    }
    Ok(())
}

/// KL between each per-sample diagonal Gaussian and one prior component,
/// as a function of log-variances: `0.5 * sum_j (lc - lp - 1 +
/// exp(lp - lc) + (mu_p - mu_c)^2 exp(-lc))`.
fn component_kl(latent: &LatentGaussian, prior: &GmmPrior, i: usize, c: usize) -> f64 {
    let d = prior.d_z();
    let mut acc = 0.0;
    for j in 0..d {
        let lp = latent.log_var[[i, j]];
        let lc = prior.log_vars[[c, j]];
        let delta = latent.mean[[i, j]] - prior.means[[c, j]];
        acc += 0.5 * (lc - lp - 1.0 + (lp - lc).exp() + delta * delta * (-lc).exp());
    }
    acc
}

/// Per-sample approximate KL against the mixture:
/// `-log sum_c pi_c exp(-KL(q_i || N_c))`, computed in log space.
pub fn kl_gaussian_vs_gmm(latent: &LatentGaussian, prior: &GmmPrior) -> Result<Array1<f64>> {
    check_latent_against_prior(latent, prior)?;
    let n = latent.mean.nrows();
    let c = prior.n_components();
    let lw = prior.log_weights();
    let mut out = Array1::<f64>::zeros(n);
    let mut scores = vec![0.0; c];
    for i in 0..n {
        for (comp, s) in scores.iter_mut().enumerate() {
            *s = lw[comp] - component_kl(latent, prior, i, comp);
        }
        out[i] = -logsumexp(&scores);
    }
    Ok(out)
}

/// Backward pass for [`kl_gaussian_vs_gmm`]. `g_out[i]` is the upstream
/// gradient on sample `i`'s KL value. Gradients on the prior's logits,
/// means, and log-variances are accumulated in place; the return value is
/// the pair of gradients on the posterior mean and log-variance.
///
/// With `w_c = softmax(log pi_c - KL_c)` the derivatives are
/// `dD/dlogit_k = pi_k - w_k` and `dD/dtheta = sum_c w_c dKL_c/dtheta`.
pub fn kl_gaussian_vs_gmm_backward(
    latent: &LatentGaussian,
    prior: &mut GmmPrior,
    g_out: &Array1<f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    check_latent_against_prior(latent, prior)?;
    let n = latent.mean.nrows();
    if g_out.len() != n {
        return Err(Error::Shape("upstream gradient length mismatch".into()));
    }
    let c = prior.n_components();
    let d = prior.d_z();
    let lw = prior.log_weights();
    let pi: Vec<f64> = lw.iter().map(|&l| l.exp()).collect();

    let mut g_mean = Array2::<f64>::zeros(latent.mean.dim());
    let mut g_log_var = Array2::<f64>::zeros(latent.mean.dim());
    let mut scores = vec![0.0; c];
    for i in 0..n {
        for (comp, s) in scores.iter_mut().enumerate() {
            *s = lw[comp] - component_kl(latent, prior, i, comp);
        }
        let lse = logsumexp(&scores);
        let scale = g_out[i];
        for comp in 0..c {
            let w = (scores[comp] - lse).exp();
            prior.g_logits[comp] += scale * (pi[comp] - w);
            for j in 0..d {
                let lp = latent.log_var[[i, j]];
                let lc = prior.log_vars[[comp, j]];
                let delta = latent.mean[[i, j]] - prior.means[[comp, j]];
                let inv_vc = (-lc).exp();
                let ratio = (lp - lc).exp();
                g_mean[[i, j]] += scale * w * delta * inv_vc;
                g_log_var[[i, j]] += scale * w * 0.5 * (ratio - 1.0);
                prior.g_means[[comp, j]] += scale * w * (-delta * inv_vc);
                prior.g_log_vars[[comp, j]] +=
                    scale * w * 0.5 * (1.0 - ratio - delta * delta * inv_vc);
            }
        }
    }
    Ok((g_mean, g_log_var))
}

/// Forward pass of the full objective in training mode (batch-statistic
/// normalisation, sampled latent). Gradients are not touched.
pub fn elbo_forward(
    model: &mut Model,
    x: &Array4<f64>,
    mask: &Array2<f64>,
    eps: &Array2<f64>,
    kl_weight: f64,
    family: ReconFamily,
) -> Result<LossBreakdown> {
    let (latent, _) = model.encoder.forward_train(x.clone())?;
    let z = reparameterize(&latent, eps);
    let (x_hat, _) = model.decoder.forward(z)?;
    let reconstruction = reconstruction_nll(x, &x_hat, mask, family)?;
    let kl_vec = kl_gaussian_vs_gmm(&latent, &model.prior)?;
    let kl = kl_vec.mean().unwrap();
    Ok(LossBreakdown {
        reconstruction,
        kl,
        total: reconstruction + kl_weight * kl,
    })
}

/// Forward plus backward: accumulates gradients for every trainable tensor
/// (encoder, decoder, prior) into the model. Callers zero gradients when
/// they mean to.
pub fn elbo_forward_backward(
    model: &mut Model,
    x: &Array4<f64>,
    mask: &Array2<f64>,
    eps: &Array2<f64>,
    kl_weight: f64,
    family: ReconFamily,
) -> Result<LossBreakdown> {
    let n = x.dim().0;
    let (latent, enc_cache) = model.encoder.forward_train(x.clone())?;
    let z = reparameterize(&latent, eps);
    let (x_hat, dec_cache) = model.decoder.forward(z)?;
    let reconstruction = reconstruction_nll(x, &x_hat, mask, family)?;
    let kl_vec = kl_gaussian_vs_gmm(&latent, &model.prior)?;
    let kl = kl_vec.mean().unwrap();

    let g_x_hat = reconstruction_nll_backward(x, &x_hat, mask, family)?;
    let g_z = model.decoder.backward(dec_cache, &g_x_hat);
    let (g_mean_r, g_log_var_r) = reparameterize_backward(&latent, eps, &g_z);

    let g_kl = Array1::from_elem(n, kl_weight / n as f64);
    let (g_mean_k, g_log_var_k) = kl_gaussian_vs_gmm_backward(&latent, &mut model.prior, &g_kl)?;

    let g_mean = &g_mean_r + &g_mean_k;
    let g_log_var = &g_log_var_r + &g_log_var_k;
    model.encoder.backward(enc_cache, &g_mean, &g_log_var);

    Ok(LossBreakdown {
        reconstruction,
        kl,
        total: reconstruction + kl_weight * kl,
    })
}

/// Evaluation-mode objective: running-statistic normalisation and the
/// posterior mean instead of a sample, so the value is deterministic.
pub fn elbo_eval(
    model: &Model,
    x: &Array4<f64>,
    mask: &Array2<f64>,
    kl_weight: f64,
    family: ReconFamily,
) -> Result<LossBreakdown> {
    let latent = model.encoder.forward_eval(x)?;
    let (x_hat, _) = model.decoder.forward(latent.mean.clone())?;
    let reconstruction = reconstruction_nll(x, &x_hat, mask, family)?;
    let kl_vec = kl_gaussian_vs_gmm(&latent, &model.prior)?;
    let kl = kl_vec.mean().unwrap();
    Ok(LossBreakdown {
        reconstruction,
        kl,
        total: reconstruction + kl_weight * kl,
    })
}

/// Outcome of a finite-difference sweep over the model's parameters.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_err: f64,
    /// Name of the tensor holding the worst probe.
    pub worst_param: String,
    pub probes: usize,
}

/// Compare the analytic gradient of the training objective against central
/// finite differences, probing every tensor (all of its entries, or an
/// evenly spaced subset of at most `max_per_tensor`).
///
/// The relative error uses `|fd - g| / max(|fd|, |g|, 1e-3)`: the floor
/// keeps near-zero gradients from being judged purely on the difference's
/// last digits, while still bounding their absolute error at `1e-3 * tol`.
pub fn finite_difference_check(
    model: &mut Model,
    x: &Array4<f64>,
    mask: &Array2<f64>,
    eps: &Array2<f64>,
    kl_weight: f64,
    family: ReconFamily,
    step: f64,
    max_per_tensor: Option<usize>,
) -> Result<FdReport> {
    model.zero_grad();
    elbo_forward_backward(model, x, mask, eps, kl_weight, family)?;
    let (names, grads): (Vec<String>, Vec<Vec<f64>>) = {
        let params = model.collect_params();
        params
            .iter()
            .map(|p| (p.name.clone(), p.grad.to_vec()))
            .unzip()
    };

    let mut report = FdReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        probes: 0,
    };
    for (tensor_idx, name) in names.iter().enumerate() {
        let len = grads[tensor_idx].len();
        let indices: Vec<usize> = match max_per_tensor {
            Some(k) if len > k => {
                // Evenly spaced, always touching both ends.
                (0..k).map(|i| i * (len - 1) / (k - 1).max(1)).collect()
            }
            _ => (0..len).collect(),
        };
        for &j in &indices {
            let mut probe = |delta: f64| -> Result<f64> {
                {
                    let mut params = model.collect_params();
                    params[tensor_idx].value[j] += delta;
                }
                let loss = elbo_forward(model, x, mask, eps, kl_weight, family)?;
                {
                    let mut params = model.collect_params();
                    params[tensor_idx].value[j] -= delta;
                }
                Ok(loss.total)
            };
            let plus = probe(step)?;
            let minus = probe(-step)?;
            let fd = (plus - minus) / (2.0 * step);
            let g = grads[tensor_idx][j];
            let rel = (fd - g).abs() / fd.abs().max(g.abs()).max(1e-3);
            report.probes += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = format!("{name}[{j}]");
            }
        }
    }
    Ok(report)
}
