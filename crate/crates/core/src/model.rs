//! The convolutional-recurrent variational autoencoder and its trainable
//! Gaussian-mixture prior.
//!
//! The encoder maps a `(batch, 1, freq, time)` spectrogram through a tower
//! of stride-2 convolution blocks (each Conv2d + BatchNorm2d + ReLU,
//! 8x8 kernels, padding 3), flattens the frequency axis into features,
//! runs a stacked GRU along time, mean-pools the hidden sequence, and
//! projects to the posterior mean and log-variance. The decoder projects a
//! latent vector to channel space, broadcasts it over a small spatial seed,
//! applies stride-2 transposed-convolution blocks (ReLU between, sigmoid
//! last) and crops the top-left window back to the input extent.
//!
//! The mixture prior holds one component per expected cluster; assigning a
//! sample to a cluster means taking the component with the highest
//! responsibility at the posterior mean.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{s, Array1, Array2, Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::act::{relu, relu_backward, sigmoid};
use crate::nn::adam::Adam;
use crate::nn::bn::{BatchNorm2d, BnCache};
use crate::nn::conv::{conv_out, Conv2d, Conv2dCache, ConvTranspose2d, ConvTranspose2dCache};
use crate::nn::gru::{Gru, GruCache};
use crate::nn::init::xavier_uniform;
use crate::nn::linear::{Linear, LinearCache};
use crate::nn::{BufferRef, ParamRef};
use crate::util::{derive_seed, logsumexp};

/// Convolution geometry shared by every block in both towers.
pub const KERNEL: usize = 8;
pub const STRIDE: usize = 2;
pub const PAD: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input spectrogram rows.
    pub freq_bins: usize,
    /// Input spectrogram columns (time frames).
    pub frames: usize,
    /// Output channels of each encoder block; the decoder mirrors this.
    pub conv_channels: Vec<usize>,
    pub gru_hidden: usize,
    pub gru_layers: usize,
    /// Latent dimensionality.
    pub d_z: usize,
    /// Mixture components (expected clusters).
    pub n_components: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            freq_bins: crate::dsp::FREQ_BINS,
            frames: crate::dsp::FRAMES,
            conv_channels: vec![16, 32, 64, 128],
            gru_hidden: 128,
            gru_layers: 2,
            d_z: 10,
            n_components: 10,
        }
    }
}

impl ModelConfig {
    /// A deliberately small variant for gradient checks and smoke tests:
    /// 16x12 input, three conv blocks, two latent dimensions, two
    /// components.
    pub fn tiny() -> Self {
        ModelConfig {
            freq_bins: 16,
            frames: 12,
            conv_channels: vec![4, 8, 16],
            gru_hidden: 8,
            gru_layers: 2,
            d_z: 2,
            n_components: 2,
        }
    }

    /// Spatial extent after each encoder block.
    pub fn conv_shapes(&self) -> Result<Vec<(usize, usize)>> {
        let mut shapes = Vec::with_capacity(self.conv_channels.len());
        let (mut h, mut w) = (self.freq_bins, self.frames);
        for _ in &self.conv_channels {
            h = conv_out(h, KERNEL, STRIDE, PAD)?;
            w = conv_out(w, KERNEL, STRIDE, PAD)?;
            if h == 0 || w == 0 {
                return Err(Error::Shape("conv tower collapses to zero extent".into()));
            }
            shapes.push((h, w));
        }
        Ok(shapes)
    }

    /// `(channels, h, w)` of the encoder's final feature map.
    pub fn encoder_output(&self) -> Result<(usize, usize, usize)> {
        let shapes = self.conv_shapes()?;
        let &(h, w) = shapes
            .last()
            .ok_or_else(|| Error::Config("conv_channels must name at least one block".into()))?;
        Ok((*self.conv_channels.last().unwrap(), h, w))
    }

    /// `(channels, h, w)` of the decoder's broadcast seed. Each of the
    /// `L` transposed blocks doubles both axes, so the seed is the input
    /// extent divided by `2^L`, rounded up; the final output is cropped
    /// back down to `(freq_bins, frames)`.
    pub fn decoder_seed(&self) -> Result<(usize, usize, usize)> {
        let l = self.conv_channels.len() as u32;
        let scale = 1usize << l;
        let seed_h = self.freq_bins.div_ceil(scale);
        let seed_w = self.frames.div_ceil(scale);
        Ok((*self.conv_channels.last().unwrap(), seed_h, seed_w))
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_channels.is_empty() {
            return Err(Error::Config("conv_channels must be non-empty".into()));
        }
        if self.conv_channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("conv channel counts must be positive".into()));
        }
        if self.gru_hidden == 0 || self.gru_layers == 0 {
            return Err(Error::Config("recurrent sizes must be positive".into()));
        }
        if self.d_z == 0 {
            return Err(Error::Config("latent dimension must be positive".into()));
        }
        if self.n_components == 0 {
            return Err(Error::Config("need at least one mixture component".into()));
        }
        self.conv_shapes()?;
        Ok(())
    }
}

/// Per-sample variational posterior: diagonal Gaussian over the latent
/// space, parameterised by mean and log-variance rows of shape `(N, d_z)`.
#[derive(Debug, Clone)]
pub struct LatentGaussian {
    pub mean: Array2<f64>,
    pub log_var: Array2<f64>,
}

/// The cluster decision for one sample.
#[derive(Debug, Clone)]
pub struct ClusterAssignment {
    /// Index of the highest-responsibility component (ties to the lowest).
    pub component: usize,
    /// Posterior responsibilities over components, summing to 1.
    pub responsibilities: Vec<f64>,
}

/// Trainable mixture prior over the latent space: mixing logits plus
/// per-component diagonal Gaussians.
pub struct GmmPrior {
    pub mixing_logits: Array1<f64>,
    /// `(C, d_z)`.
    pub means: Array2<f64>,
    pub log_vars: Array2<f64>,
    pub g_logits: Array1<f64>,
    pub g_means: Array2<f64>,
    pub g_log_vars: Array2<f64>,
}

impl GmmPrior {
    pub fn new<R: Rng>(n_components: usize, d_z: usize, rng: &mut R) -> Self {
        // Mixing weights start at a normalised uniform draw (floored away
        // from zero so the log is finite), means at a Xavier-uniform draw,
        // variances at one.
        let mut weights: Vec<f64> = (0..n_components)
            .map(|_| rng.random_range(0.0..1.0f64).max(1e-6))
            .collect();
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        let mixing_logits = Array1::from_iter(weights.iter().map(|w| w.ln()));

        let mut means = Array2::zeros((n_components, d_z));
        xavier_uniform(means.as_slice_mut().unwrap(), n_components, d_z, rng);

        GmmPrior {
            mixing_logits,
            means,
            log_vars: Array2::zeros((n_components, d_z)),
            g_logits: Array1::zeros(n_components),
            g_means: Array2::zeros((n_components, d_z)),
            g_log_vars: Array2::zeros((n_components, d_z)),
        }
    }

    pub fn n_components(&self) -> usize {
        self.mixing_logits.len()
    }

    pub fn d_z(&self) -> usize {
        self.means.ncols()
    }

    /// Normalised log mixing weights (log-softmax of the logits).
    pub fn log_weights(&self) -> Array1<f64> {
        let lse = logsumexp(self.mixing_logits.as_slice().unwrap());
        self.mixing_logits.mapv(|l| l - lse)
    }

    /// `log N(z; mu_c, diag sigma2_c)` for every component.
    pub fn log_component_density(&self, z: &[f64]) -> Vec<f64> {
        let d = self.d_z();
        let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        (0..self.n_components())
            .map(|c| {
                let mut acc = 0.0;
                for j in 0..d {
                    let lv = self.log_vars[[c, j]];
                    let diff = z[j] - self.means[[c, j]];
                    acc += -half_log_2pi - 0.5 * lv - 0.5 * diff * diff * (-lv).exp();
                }
                acc
            })
            .collect()
    }

    /// Log responsibilities `log q(c|z)` computed stably in log space.
    pub fn log_responsibilities(&self, z: &[f64]) -> Vec<f64> {
        let lw = self.log_weights();
        let mut joint: Vec<f64> = self
            .log_component_density(z)
            .into_iter()
            .zip(lw.iter())
            .map(|(ld, &w)| ld + w)
            .collect();
        let lse = logsumexp(&joint);
        joint.iter_mut().for_each(|v| *v -= lse);
        joint
    }

    /// Hard cluster decision at a latent point.
    pub fn assign(&self, z: &[f64]) -> ClusterAssignment {
        let log_resp = self.log_responsibilities(z);
        let mut component = 0usize;
        let mut best = f64::NEG_INFINITY;
        for (c, &lr) in log_resp.iter().enumerate() {
            if lr > best {
                best = lr;
                component = c;
            }
        }
        ClusterAssignment {
            component,
            responsibilities: log_resp.iter().map(|&lr| lr.exp()).collect(),
        }
    }

    pub fn zero_grad(&mut self) {
        self.g_logits.fill(0.0);
        self.g_means.fill(0.0);
        self.g_log_vars.fill(0.0);
    }

    pub fn collect<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        out.push(ParamRef {
            name: format!("{prefix}.mixing_logits"),
            value: self.mixing_logits.as_slice_mut().unwrap(),
            grad: self.g_logits.as_slice_mut().unwrap(),
        });
        out.push(ParamRef {
            name: format!("{prefix}.means"),
            value: self.means.as_slice_mut().unwrap(),
            grad: self.g_means.as_slice_mut().unwrap(),
        });
        out.push(ParamRef {
            name: format!("{prefix}.log_vars"),
            value: self.log_vars.as_slice_mut().unwrap(),
            grad: self.g_log_vars.as_slice_mut().unwrap(),
        });
    }

    pub fn param_count(&self) -> usize {
        self.mixing_logits.len() + self.means.len() + self.log_vars.len()
    }
}

/// `z = mu + exp(log_var / 2) * eps`, elementwise over `(N, d_z)`.
pub fn reparameterize(latent: &LatentGaussian, eps: &Array2<f64>) -> Array2<f64> {
    &latent.mean + &(latent.log_var.mapv(|lv| (0.5 * lv).exp()) * eps)
}

/// Gradients of a loss through the reparametrized sample back onto the
/// posterior parameters: `dz/dmu = 1`, `dz/dlog_var = (z - mu)/2`.
pub fn reparameterize_backward(
    latent: &LatentGaussian,
    eps: &Array2<f64>,
    g_z: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let g_mean = g_z.clone();
    let sigma_eps = latent.log_var.mapv(|lv| (0.5 * lv).exp()) * eps;
    let g_log_var = g_z * &sigma_eps * 0.5;
    (g_mean, g_log_var)
}

struct ConvBlockCache {
    conv: Conv2dCache,
    bn: BnCache,
    pre_relu: Array4<f64>,
}

pub struct EncoderCache {
    blocks: Vec<ConvBlockCache>,
    gru: GruCache,
    seq_len: usize,
    head: LinearCache,
    /// Encoder final feature-map dims `(C, H, W)` for the reshape adjoint.
    feat_dims: (usize, usize, usize),
}

pub struct Encoder {
    pub convs: Vec<Conv2d>,
    pub bns: Vec<BatchNorm2d>,
    pub gru: Gru,
    /// Projects the pooled hidden state to `[mean; log_var]`.
    pub head: Linear,
    d_z: usize,
}

/// Rearrange `(N, C, H, T)` feature maps into `(N, T, C*H)` sequences.
fn to_sequence(x: &Array4<f64>) -> Array3<f64> {
    let (n, c, h, t) = x.dim();
    let mut seq = Array3::<f64>::zeros((n, t, c * h));
    for i in 0..n {
        for ch in 0..c {
            for row in 0..h {
                for col in 0..t {
                    seq[[i, col, ch * h + row]] = x[[i, ch, row, col]];
                }
            }
        }
    }
    seq
}

/// Adjoint of [`to_sequence`].
fn from_sequence(g: &Array3<f64>, dims: (usize, usize, usize)) -> Array4<f64> {
    let (c, h, t) = dims;
    let n = g.dim().0;
    let mut x = Array4::<f64>::zeros((n, c, h, t));
    for i in 0..n {
        for ch in 0..c {
            for row in 0..h {
                for col in 0..t {
                    x[[i, ch, row, col]] = g[[i, col, ch * h + row]];
                }
            }
        }
    }
    x
}

impl Encoder {
    fn new<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let (c_f, h_f, _w_f) = cfg.encoder_output()?;
        let mut convs = Vec::new();
        let mut bns = Vec::new();
        let mut in_c = 1usize;
        for &out_c in &cfg.conv_channels {
            convs.push(Conv2d::new(in_c, out_c, KERNEL, STRIDE, PAD, rng));
            bns.push(BatchNorm2d::new(out_c));
            in_c = out_c;
        }
        let gru = Gru::new(c_f * h_f, cfg.gru_hidden, cfg.gru_layers, rng);
        let head = Linear::new(cfg.gru_hidden, 2 * cfg.d_z, rng);
        Ok(Encoder {
            convs,
            bns,
            gru,
            head,
            d_z: cfg.d_z,
        })
    }

    fn split_head(&self, out: Array2<f64>) -> LatentGaussian {
        let mean = out.slice(s![.., 0..self.d_z]).to_owned();
        let log_var = out.slice(s![.., self.d_z..2 * self.d_z]).to_owned();
        LatentGaussian { mean, log_var }
    }

    pub fn forward_train(&mut self, x: Array4<f64>) -> Result<(LatentGaussian, EncoderCache)> {
        let mut cur = x;
        let mut blocks = Vec::with_capacity(self.convs.len());
        for (conv, bn) in self.convs.iter().zip(self.bns.iter_mut()) {
            let (y, conv_cache) = conv.forward(cur)?;
            let (pre_relu, bn_cache) = bn.forward_train(y);
            cur = relu(&pre_relu);
            blocks.push(ConvBlockCache {
                conv: conv_cache,
                bn: bn_cache,
                pre_relu,
            });
        }
        let (_, c, h, t) = cur.dim();
        let seq = to_sequence(&cur);
        let (hidden_seq, gru_cache) = self.gru.forward(seq);
        let pooled = hidden_seq.mean_axis(Axis(1)).unwrap();
        let (out, head_cache) = self.head.forward(pooled);
        Ok((
            self.split_head(out),
            EncoderCache {
                blocks,
                gru: gru_cache,
                seq_len: t,
                head: head_cache,
                feat_dims: (c, h, t),
            },
        ))
    }

    pub fn forward_eval(&self, x: &Array4<f64>) -> Result<LatentGaussian> {
        let mut cur = x.clone();
        for (conv, bn) in self.convs.iter().zip(self.bns.iter()) {
            let (y, _) = conv.forward(cur)?;
            let normed = bn.forward_eval(&y);
            cur = relu(&normed);
        }
        let seq = to_sequence(&cur);
        let (hidden_seq, _) = self.gru.forward(seq);
        let pooled = hidden_seq.mean_axis(Axis(1)).unwrap();
        let (out, _) = self.head.forward(pooled);
        Ok(self.split_head(out))
    }

    pub fn backward(&mut self, cache: EncoderCache, g_mean: &Array2<f64>, g_log_var: &Array2<f64>) {
        let n = g_mean.nrows();
        let mut g_out = Array2::<f64>::zeros((n, 2 * self.d_z));
        g_out.slice_mut(s![.., 0..self.d_z]).assign(g_mean);
        g_out
            .slice_mut(s![.., self.d_z..2 * self.d_z])
            .assign(g_log_var);
        let g_pooled = self.head.backward(cache.head, &g_out);

        // Mean pool: every timestep receives 1/T of the pooled gradient.
        let t = cache.seq_len;
        let hidden = g_pooled.ncols();
        let mut g_seq = Array3::<f64>::zeros((n, t, hidden));
        for step in 0..t {
            let mut dst = g_seq.index_axis_mut(Axis(1), step);
            dst.assign(&g_pooled);
            dst.mapv_inplace(|v| v / t as f64);
        }
        let g_gru_in = self.gru.backward(&cache.gru, &g_seq);
        let mut g_cur = from_sequence(&g_gru_in, cache.feat_dims);

        for (block, (conv, bn)) in cache
            .blocks
            .into_iter()
            .zip(self.convs.iter_mut().zip(self.bns.iter_mut()))
            .rev()
        {
            let g_pre = relu_backward(&block.pre_relu, &g_cur);
            let g_bn = bn.backward(block.bn, &g_pre);
            g_cur = conv.backward(block.conv, g_bn.view());
        }
    }

    pub fn zero_grad(&mut self) {
        for c in &mut self.convs {
            c.zero_grad();
        }
        for b in &mut self.bns {
            b.zero_grad();
        }
        self.gru.zero_grad();
        self.head.zero_grad();
    }

    pub fn collect<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.collect(&format!("{prefix}.conv{i}"), out);
        }
        for (i, b) in self.bns.iter_mut().enumerate() {
            b.collect(&format!("{prefix}.bn{i}"), out);
        }
        self.gru.collect(&format!("{prefix}.gru"), out);
        self.head.collect(&format!("{prefix}.head"), out);
    }

    pub fn collect_buffers<'a>(&'a mut self, prefix: &str, out: &mut Vec<BufferRef<'a>>) {
        for (i, b) in self.bns.iter_mut().enumerate() {
            b.collect_buffers(&format!("{prefix}.bn{i}"), out);
        }
    }

    pub fn param_count(&self) -> usize {
        self.convs.iter().map(|c| c.param_count()).sum::<usize>()
            + self.bns.iter().map(|b| b.param_count()).sum::<usize>()
            + self.gru.param_count()
            + self.head.param_count()
    }
}

struct DeconvBlockCache {
    cache: ConvTranspose2dCache,
    /// Pre-ReLU output; absent for the final (sigmoid) block.
    pre_relu: Option<Array4<f64>>,
}

pub struct DecoderCache {
    latent: LinearCache,
    pre_seed: Array2<f64>,
    blocks: Vec<DeconvBlockCache>,
    /// Sigmoid output on the cropped window (for the sigmoid backward).
    y: Array4<f64>,
    full_dims: (usize, usize),
}

pub struct Decoder {
    /// Projects `z` to the seed channel vector.
    pub latent: Linear,
    pub deconvs: Vec<ConvTranspose2d>,
    seed_h: usize,
    seed_w: usize,
    out_h: usize,
    out_w: usize,
}

impl Decoder {
    fn new<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let (seed_c, seed_h, seed_w) = cfg.decoder_seed()?;
        let latent = Linear::new(cfg.d_z, seed_c, rng);
        // Mirror the encoder ladder down to one output channel.
        let mut chans: Vec<usize> = cfg.conv_channels.iter().rev().copied().collect();
        chans.push(1);
        let mut deconvs = Vec::new();
        for pair in chans.windows(2) {
            deconvs.push(ConvTranspose2d::new(
                pair[0], pair[1], KERNEL, STRIDE, PAD, rng,
            ));
        }
        Ok(Decoder {
            latent,
            deconvs,
            seed_h,
            seed_w,
            out_h: cfg.freq_bins,
            out_w: cfg.frames,
        })
    }

    /// `z` is `(N, d_z)`; the output is `(N, 1, freq, time)` in `(0, 1)`.
    pub fn forward(&self, z: Array2<f64>) -> Result<(Array4<f64>, DecoderCache)> {
        let n = z.nrows();
        let (pre_seed, latent_cache) = self.latent.forward(z);
        let seed_vec = relu(&pre_seed);
        let c = seed_vec.ncols();
        let mut cur = Array4::<f64>::zeros((n, c, self.seed_h, self.seed_w));
        for i in 0..n {
            for ch in 0..c {
                let v = seed_vec[[i, ch]];
                cur.slice_mut(s![i, ch, .., ..]).fill(v);
            }
        }

        let mut blocks = Vec::with_capacity(self.deconvs.len());
        let last = self.deconvs.len() - 1;
        for (i, deconv) in self.deconvs.iter().enumerate() {
            let (y, cache) = deconv.forward(cur)?;
            if i < last {
                cur = relu(&y);
                blocks.push(DeconvBlockCache {
                    cache,
                    pre_relu: Some(y),
                });
            } else {
                cur = y;
                blocks.push(DeconvBlockCache {
                    cache,
                    pre_relu: None,
                });
            }
        }

        let (_, _, fh, fw) = cur.dim();
        if fh < self.out_h || fw < self.out_w {
            return Err(Error::Shape(format!(
                "decoder output {fh}x{fw} smaller than target {}x{}",
                self.out_h, self.out_w
            )));
        }
        let cropped = cur
            .slice(s![.., .., 0..self.out_h, 0..self.out_w])
            .to_owned();
        let y = sigmoid(&cropped);
        Ok((
            y.clone(),
            DecoderCache {
                latent: latent_cache,
                pre_seed,
                blocks,
                y,
                full_dims: (fh, fw),
            },
        ))
    }

    /// Returns the gradient with respect to `z`.
    pub fn backward(&mut self, cache: DecoderCache, g_y: &Array4<f64>) -> Array2<f64> {
        let (n, _, _h, _w) = g_y.dim();
        let (fh, fw) = cache.full_dims;
        // Through the sigmoid, then scatter into the uncropped extent.
        let g_sig = crate::nn::act::sigmoid_backward(&cache.y, g_y);
        let mut g_full = Array4::<f64>::zeros((n, 1, fh, fw));
        g_full
            .slice_mut(s![.., .., 0..self.out_h, 0..self.out_w])
            .assign(&g_sig);

        let mut g_cur = g_full;
        for (block, deconv) in cache.blocks.into_iter().zip(self.deconvs.iter_mut()).rev() {
            if let Some(pre) = &block.pre_relu {
                g_cur = relu_backward(pre, &g_cur);
            }
            g_cur = deconv.backward(block.cache, g_cur.view());
        }

        // Broadcast seed: sum spatial positions back onto the channel vector.
        let (_, c, _, _) = g_cur.dim();
        let mut g_seed = Array2::<f64>::zeros((n, c));
        for i in 0..n {
            for ch in 0..c {
                g_seed[[i, ch]] = g_cur.slice(s![i, ch, .., ..]).sum();
            }
        }
        let g_pre_seed = relu_backward(&cache.pre_seed, &g_seed);
        self.latent.backward(cache.latent, &g_pre_seed)
    }

    pub fn zero_grad(&mut self) {
        self.latent.zero_grad();
        for d in &mut self.deconvs {
            d.zero_grad();
        }
    }

    pub fn collect<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        self.latent.collect(&format!("{prefix}.latent"), out);
        for (i, d) in self.deconvs.iter_mut().enumerate() {
            d.collect(&format!("{prefix}.deconv{i}"), out);
        }
    }

    pub fn param_count(&self) -> usize {
        self.latent.param_count() + self.deconvs.iter().map(|d| d.param_count()).sum::<usize>()
    }

    pub fn latent_param_count(&self) -> usize {
        self.latent.param_count()
    }
}

/// Encoder, decoder, and prior under one roof.
pub struct Model {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub prior: GmmPrior,
}

impl Model {
    /// Build and initialise from a master seed: weights are Kaiming-uniform
    /// with zero biases, the prior as described on [`GmmPrior::new`].
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, "model-init"));
        let encoder = Encoder::new(&cfg, &mut rng)?;
        let decoder = Decoder::new(&cfg, &mut rng)?;
        let prior = GmmPrior::new(cfg.n_components, cfg.d_z, &mut rng);
        Ok(Model {
            cfg,
            encoder,
            decoder,
            prior,
        })
    }

    pub fn zero_grad(&mut self) {
        self.encoder.zero_grad();
        self.decoder.zero_grad();
        self.prior.zero_grad();
    }

    /// Every trainable tensor, in a fixed order, named by group:
    /// `encoder.*`, `decoder.*`, `prior.*`.
    pub fn collect_params(&mut self) -> Vec<ParamRef<'_>> {
        let mut out = Vec::new();
        self.encoder.collect("encoder", &mut out);
        self.decoder.collect("decoder", &mut out);
        self.prior.collect("prior", &mut out);
        out
    }

    pub fn collect_buffers(&mut self) -> Vec<BufferRef<'_>> {
        let mut out = Vec::new();
        self.encoder.collect_buffers("encoder", &mut out);
        out
    }

    /// `(total, inference)` trainable scalar counts. The inference subset
    /// is what a deployed clusterer needs: the encoder, the latent
    /// projection, and the prior.
    pub fn count_parameters(&self) -> (usize, usize) {
        let total =
            self.encoder.param_count() + self.decoder.param_count() + self.prior.param_count();
        let inference = self.encoder.param_count()
            + self.decoder.latent_param_count()
            + self.prior.param_count();
        (total, inference)
    }

    /// Cluster a batch through the evaluation path: encode, take the
    /// posterior mean, and pick the highest-responsibility component.
    pub fn assign_batch(&self, x: &Array4<f64>) -> Result<Vec<ClusterAssignment>> {
        let latent = self.encoder.forward_eval(x)?;
        Ok((0..latent.mean.nrows())
            .map(|i| self.prior.assign(latent.mean.row(i).as_slice().unwrap()))
            .collect())
    }
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

const CKPT_MAGIC: [u8; 8] = *b"VACCKP01";
const CKPT_VERSION: u32 = 1;

/// Everything a resumed or evaluated run needs.
pub struct Checkpoint {
    pub model: Model,
    pub adam: Option<Adam>,
    pub epoch: u32,
    pub dsp_hash: u64,
}

fn write_tensor(out: &mut impl Write, name: &str, data: &[f64]) -> Result<()> {
    let name_bytes = name.as_bytes();
    out.write_u16::<LittleEndian>(name_bytes.len() as u16)?;
    out.write_all(name_bytes)?;
    out.write_u64::<LittleEndian>(data.len() as u64)?;
    for &v in data {
        out.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

fn read_tensor(input: &mut impl Read) -> Result<(String, Vec<f64>)> {
    let name_len = input.read_u16::<LittleEndian>()? as usize;
    let mut name = vec![0u8; name_len];
    input.read_exact(&mut name)?;
    let name = String::from_utf8(name)
        .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
    let len = input.read_u64::<LittleEndian>()? as usize;
    if len > (1 << 28) {
        return Err(Error::Checkpoint(format!(
            "tensor {name} claims implausible length {len}"
        )));
    }
    let mut data = vec![0.0f64; len];
    for v in data.iter_mut() {
        *v = input.read_f64::<LittleEndian>()?;
    }
    Ok((name, data))
}

/// Serialise the model (with optimizer state if given) plus the hash of the
/// preprocessing that produced its training data. Written atomically.
pub fn save_checkpoint(
    path: &Path,
    model: &mut Model,
    adam: Option<&Adam>,
    epoch: u32,
    dsp_hash: u64,
) -> Result<()> {
    let tmp = path.with_extension("ckpt-tmp");
    {
        let mut out = BufWriter::new(File::create(&tmp)?);
        out.write_all(&CKPT_MAGIC)?;
        out.write_u32::<LittleEndian>(CKPT_VERSION)?;
        out.write_u64::<LittleEndian>(dsp_hash)?;
        out.write_u32::<LittleEndian>(epoch)?;

        let cfg_json = serde_json::to_string(&model.cfg)
            .map_err(|e| Error::Checkpoint(format!("config serialization: {e}")))?;
        out.write_u32::<LittleEndian>(cfg_json.len() as u32)?;
        out.write_all(cfg_json.as_bytes())?;

        let params = model.collect_params();
        out.write_u32::<LittleEndian>(params.len() as u32)?;
        for p in &params {
            write_tensor(&mut out, &p.name, p.value)?;
        }
        drop(params);

        let buffers = model.collect_buffers();
        out.write_u32::<LittleEndian>(buffers.len() as u32)?;
        for b in &buffers {
            write_tensor(&mut out, &b.name, b.value)?;
        }
        drop(buffers);

        match adam {
            Some(a) => {
                out.write_u8(1)?;
                out.write_u64::<LittleEndian>(a.t)?;
                out.write_u32::<LittleEndian>(a.m.len() as u32)?;
                for (m, v) in a.m.iter().zip(a.v.iter()) {
                    write_tensor(&mut out, "m", m)?;
                    write_tensor(&mut out, "v", v)?;
                }
            }
            None => out.write_u8(0)?,
        }
        out.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Load a checkpoint; the geometry is rebuilt from the stored config and
/// every tensor is matched by name, so any drift between writer and reader
/// is an error rather than a silent misload.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut input = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if magic != CKPT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint",
            path.display()
        )));
    }
    let version = input.read_u32::<LittleEndian>()?;
    if version != CKPT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let dsp_hash = input.read_u64::<LittleEndian>()?;
    let epoch = input.read_u32::<LittleEndian>()?;
    let cfg_len = input.read_u32::<LittleEndian>()? as usize;
    let mut cfg_bytes = vec![0u8; cfg_len];
    input.read_exact(&mut cfg_bytes)?;
    let cfg: ModelConfig = serde_json::from_slice(&cfg_bytes)
        .map_err(|e| Error::Checkpoint(format!("config deserialization: {e}")))?;

    let mut model = Model::new(cfg, 0)?;

    let n_params = input.read_u32::<LittleEndian>()? as usize;
    {
        let mut params = model.collect_params();
        if params.len() != n_params {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {n_params} tensors, model expects {}",
                params.len()
            )));
        }
        for p in params.iter_mut() {
            let (name, data) = read_tensor(&mut input)?;
            if name != p.name {
                return Err(Error::Checkpoint(format!(
                    "tensor order mismatch: file has {name}, model expects {}",
                    p.name
                )));
            }
            if data.len() != p.value.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has {} scalars, model expects {}",
                    data.len(),
                    p.value.len()
                )));
            }
            p.value.copy_from_slice(&data);
        }
    }

    let n_buffers = input.read_u32::<LittleEndian>()? as usize;
    {
        let mut buffers = model.collect_buffers();
        if buffers.len() != n_buffers {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {n_buffers} buffers, model expects {}",
                buffers.len()
            )));
        }
        for b in buffers.iter_mut() {
            let (name, data) = read_tensor(&mut input)?;
            if name != b.name || data.len() != b.value.len() {
                return Err(Error::Checkpoint(format!("buffer mismatch at {name}")));
            }
            b.value.copy_from_slice(&data);
        }
    }

    let has_adam = input.read_u8()? != 0;
    let adam = if has_adam {
        let t = input.read_u64::<LittleEndian>()?;
        let count = input.read_u32::<LittleEndian>()? as usize;
        let mut m = Vec::with_capacity(count);
        let mut v = Vec::with_capacity(count);
        for _ in 0..count {
            let (_, md) = read_tensor(&mut input)?;
            let (_, vd) = read_tensor(&mut input)?;
            m.push(md);
            v.push(vd);
        }
        let mut a = Adam::new();
        a.t = t;
        a.m = m;
        a.v = v;
        Some(a)
    } else {
        None
    };

    Ok(Checkpoint {
        model,
        adam,
        epoch,
        dsp_hash,
    })
}
