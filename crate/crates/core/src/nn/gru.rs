//! Stacked gated recurrent units with full backpropagation through time.
//!
//! Gate convention (r = reset, z = update, n = candidate):
//!
//! ```text
//! r_t = sigmoid(W_ir x_t + b_ir + W_hr h_{t-1} + b_hr)
//! z_t = sigmoid(W_iz x_t + b_iz + W_hz h_{t-1} + b_hz)
//! n_t = tanh  (W_in x_t + b_in + r_t * (W_hn h_{t-1} + b_hn))
//! h_t = (1 - z_t) * n_t + z_t * h_{t-1}
//! ```
//!
//! Weights are stored stacked along the gate axis in the order `[r; z; n]`,
//! so `w_ih` is `(3H, F)` and `w_hh` is `(3H, H)`. The initial hidden state
//! is zero.

use ndarray::{s, Array1, Array2, Array3, Axis};
use rand::Rng;

use super::init::kaiming_uniform;
use super::ParamRef;

pub struct GruLayer {
    pub w_ih: Array2<f64>,
    pub w_hh: Array2<f64>,
    pub b_ih: Array1<f64>,
    pub b_hh: Array1<f64>,
    pub gw_ih: Array2<f64>,
    pub gw_hh: Array2<f64>,
    pub gb_ih: Array1<f64>,
    pub gb_hh: Array1<f64>,
    pub hidden: usize,
}

/// Everything one timestep's backward pass needs.
struct StepCache {
    h_prev: Array2<f64>,
    r: Array2<f64>,
    z: Array2<f64>,
    n: Array2<f64>,
    /// `W_hn h_{t-1} + b_hn`, the pre-gate hidden contribution to `n`.
    hn_hidden: Array2<f64>,
}

struct LayerCache {
    /// Input sequence to this layer, `(N, T, F)`.
    x: Array3<f64>,
    steps: Vec<StepCache>,
}

pub struct GruCache {
    layers: Vec<LayerCache>,
}

fn sigmoid_inplace(a: &mut Array2<f64>) {
    a.mapv_inplace(|v| 1.0 / (1.0 + (-v).exp()));
}

impl GruLayer {
    pub fn new<R: Rng>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let mut w_ih = Array2::zeros((3 * hidden, input));
        let mut w_hh = Array2::zeros((3 * hidden, hidden));
        kaiming_uniform(w_ih.as_slice_mut().unwrap(), input, rng);
        kaiming_uniform(w_hh.as_slice_mut().unwrap(), hidden, rng);
        GruLayer {
            w_ih,
            w_hh,
            b_ih: Array1::zeros(3 * hidden),
            b_hh: Array1::zeros(3 * hidden),
            gw_ih: Array2::zeros((3 * hidden, input)),
            gw_hh: Array2::zeros((3 * hidden, hidden)),
            gb_ih: Array1::zeros(3 * hidden),
            gb_hh: Array1::zeros(3 * hidden),
            hidden,
        }
    }

    /// One layer over the whole sequence; returns `(N, T, H)` outputs.
    fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, LayerCache) {
        let (n, t, _f) = x.dim();
        let hd = self.hidden;
        let mut h = Array2::<f64>::zeros((n, hd));
        let mut out = Array3::<f64>::zeros((n, t, hd));
        let mut steps = Vec::with_capacity(t);
        for step in 0..t {
            let x_t = x.index_axis(Axis(1), step).to_owned();
            let pre_i = x_t.dot(&self.w_ih.t()) + &self.b_ih; // (N, 3H)
            let pre_h = h.dot(&self.w_hh.t()) + &self.b_hh; // (N, 3H)

            let mut r = &pre_i.slice(s![.., 0..hd]) + &pre_h.slice(s![.., 0..hd]);
            sigmoid_inplace(&mut r);
            let mut z = &pre_i.slice(s![.., hd..2 * hd]) + &pre_h.slice(s![.., hd..2 * hd]);
            sigmoid_inplace(&mut z);
            let hn_hidden = pre_h.slice(s![.., 2 * hd..3 * hd]).to_owned();
            let mut cand = pre_i.slice(s![.., 2 * hd..3 * hd]).to_owned();
            cand += &(&r * &hn_hidden);
            cand.mapv_inplace(f64::tanh);

            let h_prev = h;
            h = &(&cand * &(1.0 - &z)) + &(&z * &h_prev);
            out.index_axis_mut(Axis(1), step).assign(&h);
            steps.push(StepCache {
                h_prev,
                r,
                z,
                n: cand,
                hn_hidden,
            });
        }
        (
            out,
            LayerCache {
                x: x.clone(),
                steps,
            },
        )
    }

    /// BPTT for one layer. `gy` is the gradient on this layer's output
    /// sequence; the return value is the gradient on its input sequence.
    fn backward(&mut self, cache: &LayerCache, gy: &Array3<f64>) -> Array3<f64> {
        let (n, t, f) = cache.x.dim();
        let hd = self.hidden;
        let mut gx = Array3::<f64>::zeros((n, t, f));
        let mut dh_carry = Array2::<f64>::zeros((n, hd));
        for step in (0..t).rev() {
            let sc = &cache.steps[step];
            let dh = &gy.index_axis(Axis(1), step).to_owned() + &dh_carry;

            let dz = &dh * &(&sc.h_prev - &sc.n);
            let dn = &dh * &(1.0 - &sc.z);
            let mut dh_prev = &dh * &sc.z;

            let dn_pre = &dn * &sc.n.mapv(|v| 1.0 - v * v);
            let dr = &dn_pre * &sc.hn_hidden;
            let d_hn_hidden = &dn_pre * &sc.r;
            let dz_pre = &dz * &sc.z.mapv(|v| v * (1.0 - v));
            let dr_pre = &dr * &sc.r.mapv(|v| v * (1.0 - v));

            // Stack per-gate pre-activation gradients to (N, 3H).
            let mut g_ih = Array2::<f64>::zeros((n, 3 * hd));
            g_ih.slice_mut(s![.., 0..hd]).assign(&dr_pre);
            g_ih.slice_mut(s![.., hd..2 * hd]).assign(&dz_pre);
            g_ih.slice_mut(s![.., 2 * hd..3 * hd]).assign(&dn_pre);
            let mut g_hh = g_ih.clone();
            g_hh.slice_mut(s![.., 2 * hd..3 * hd]).assign(&d_hn_hidden);

            let x_t = cache.x.index_axis(Axis(1), step).to_owned();
            self.gw_ih += &g_ih.t().dot(&x_t);
            self.gw_hh += &g_hh.t().dot(&sc.h_prev);
            self.gb_ih += &g_ih.sum_axis(Axis(0));
            self.gb_hh += &g_hh.sum_axis(Axis(0));

            gx.index_axis_mut(Axis(1), step)
                .assign(&g_ih.dot(&self.w_ih));
            dh_prev += &g_hh.dot(&self.w_hh);
            dh_carry = dh_prev;
        }
        gx
    }

    pub fn zero_grad(&mut self) {
        self.gw_ih.fill(0.0);
        self.gw_hh.fill(0.0);
        self.gb_ih.fill(0.0);
        self.gb_hh.fill(0.0);
    }

    pub fn param_count(&self) -> usize {
        self.w_ih.len() + self.w_hh.len() + self.b_ih.len() + self.b_hh.len()
    }
}

/// A stack of GRU layers; each layer consumes the full output sequence of
/// the one below.
pub struct Gru {
    pub layers: Vec<GruLayer>,
}

impl Gru {
    pub fn new<R: Rng>(input: usize, hidden: usize, num_layers: usize, rng: &mut R) -> Self {
        assert!(num_layers >= 1);
        let mut layers = Vec::with_capacity(num_layers);
        layers.push(GruLayer::new(input, hidden, rng));
        for _ in 1..num_layers {
            layers.push(GruLayer::new(hidden, hidden, rng));
        }
        Gru { layers }
    }

    /// `x` is `(N, T, F)`; returns the last layer's `(N, T, H)` sequence.
    pub fn forward(&self, x: Array3<f64>) -> (Array3<f64>, GruCache) {
        let mut seq = x;
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (out, cache) = layer.forward(&seq);
            caches.push(cache);
            seq = out;
        }
        (seq, GruCache { layers: caches })
    }

    pub fn backward(&mut self, cache: &GruCache, gy: &Array3<f64>) -> Array3<f64> {
        let mut grad = gy.clone();
        for (layer, lc) in self.layers.iter_mut().zip(cache.layers.iter()).rev() {
            grad = layer.backward(lc, &grad);
        }
        grad
    }

    pub fn zero_grad(&mut self) {
        for l in &mut self.layers {
            l.zero_grad();
        }
    }

    pub fn collect<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push(ParamRef {
                name: format!("{prefix}.l{i}.w_ih"),
                value: l.w_ih.as_slice_mut().unwrap(),
                grad: l.gw_ih.as_slice_mut().unwrap(),
            });
            out.push(ParamRef {
                name: format!("{prefix}.l{i}.w_hh"),
                value: l.w_hh.as_slice_mut().unwrap(),
                grad: l.gw_hh.as_slice_mut().unwrap(),
            });
            out.push(ParamRef {
                name: format!("{prefix}.l{i}.b_ih"),
                value: l.b_ih.as_slice_mut().unwrap(),
                grad: l.gb_ih.as_slice_mut().unwrap(),
            });
            out.push(ParamRef {
                name: format!("{prefix}.l{i}.b_hh"),
                value: l.b_hh.as_slice_mut().unwrap(),
                grad: l.gb_hh.as_slice_mut().unwrap(),
            });
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.param_count()).sum()
    }
}
