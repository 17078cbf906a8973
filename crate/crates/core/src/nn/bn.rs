//! Batch normalisation over the channel axis of `(N, C, H, W)` tensors.

use ndarray::{Array1, Array4, Axis};

use super::{BufferRef, ParamRef};

pub struct BatchNorm2d {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub g_gamma: Array1<f64>,
    pub g_beta: Array1<f64>,
    /// Exponential moving averages used in evaluation mode.
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
    pub eps: f64,
}

pub struct BnCache {
    xhat: Array4<f64>,
    inv_std: Array1<f64>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            g_gamma: Array1::zeros(channels),
            g_beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// Training-mode forward: normalise by batch statistics and fold them
    /// into the running averages (variance unbiased, as is conventional).
    pub fn forward_train(&mut self, x: Array4<f64>) -> (Array4<f64>, BnCache) {
        let (n, c, h, w) = x.dim();
        let m = (n * h * w) as f64;
        let mut mean = Array1::<f64>::zeros(c);
        let mut var = Array1::<f64>::zeros(c);
        for ch in 0..c {
            let slice = x.index_axis(Axis(1), ch);
            let mu = slice.sum() / m;
            mean[ch] = mu;
            var[ch] = slice.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / m;
        }
        let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());

        let mut xhat = x;
        for ch in 0..c {
            let mu = mean[ch];
            let is = inv_std[ch];
            xhat.index_axis_mut(Axis(1), ch)
                .mapv_inplace(|v| (v - mu) * is);
        }
        let mut y = xhat.clone();
        for ch in 0..c {
            let g = self.gamma[ch];
            let b = self.beta[ch];
            y.index_axis_mut(Axis(1), ch).mapv_inplace(|v| g * v + b);
        }

        let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
        for ch in 0..c {
            self.running_mean[ch] =
                (1.0 - self.momentum) * self.running_mean[ch] + self.momentum * mean[ch];
            self.running_var[ch] =
                (1.0 - self.momentum) * self.running_var[ch] + self.momentum * var[ch] * unbias;
        }

        (y, BnCache { xhat, inv_std })
    }

    /// Evaluation-mode forward: normalise by the running statistics.
    pub fn forward_eval(&self, x: &Array4<f64>) -> Array4<f64> {
        let c = x.dim().1;
        let mut y = x.clone();
        for ch in 0..c {
            let mu = self.running_mean[ch];
            let is = 1.0 / (self.running_var[ch] + self.eps).sqrt();
            let g = self.gamma[ch];
            let b = self.beta[ch];
            y.index_axis_mut(Axis(1), ch)
                .mapv_inplace(|v| g * (v - mu) * is + b);
        }
        y
    }

    pub fn backward(&mut self, cache: BnCache, gy: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = gy.dim();
        let m = (n * h * w) as f64;
        let mut gx = Array4::<f64>::zeros((n, c, h, w));
        for ch in 0..c {
            let xhat_c = cache.xhat.index_axis(Axis(1), ch);
            let gy_c = gy.index_axis(Axis(1), ch);
            let sum_gy: f64 = gy_c.sum();
            let sum_gy_xhat: f64 = gy_c.iter().zip(xhat_c.iter()).map(|(a, b)| a * b).sum();
            self.g_beta[ch] += sum_gy;
            self.g_gamma[ch] += sum_gy_xhat;
            // dx = gamma * inv_std / m * (m*gy - sum(gy) - xhat * sum(gy*xhat))
            let scale = self.gamma[ch] * cache.inv_std[ch] / m;
            let mut gx_c = gx.index_axis_mut(Axis(1), ch);
            ndarray::Zip::from(&mut gx_c)
                .and(&gy_c)
                .and(&xhat_c)
                .for_each(|out, &g, &xh| {
                    *out = scale * (m * g - sum_gy - xh * sum_gy_xhat);
                });
        }
        gx
    }

    pub fn zero_grad(&mut self) {
        self.g_gamma.fill(0.0);
        self.g_beta.fill(0.0);
    }

    pub fn collect<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        out.push(ParamRef {
            name: format!("{prefix}.gamma"),
            value: self.gamma.as_slice_mut().unwrap(),
            grad: self.g_gamma.as_slice_mut().unwrap(),
        });
        out.push(ParamRef {
            name: format!("{prefix}.beta"),
            value: self.beta.as_slice_mut().unwrap(),
            grad: self.g_beta.as_slice_mut().unwrap(),
        });
    }

    pub fn collect_buffers<'a>(&'a mut self, prefix: &str, out: &mut Vec<BufferRef<'a>>) {
        out.push(BufferRef {
            name: format!("{prefix}.running_mean"),
            value: self.running_mean.as_slice_mut().unwrap(),
        });
        out.push(BufferRef {
            name: format!("{prefix}.running_var"),
            value: self.running_var.as_slice_mut().unwrap(),
        });
    }

    pub fn param_count(&self) -> usize {
        self.gamma.len() + self.beta.len()
    }
}
