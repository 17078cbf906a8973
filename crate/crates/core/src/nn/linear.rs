//! Fully connected layer.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use super::init::kaiming_uniform;
use super::ParamRef;

pub struct Linear {
    /// `(out_features, in_features)`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub gw: Array2<f64>,
    pub gb: Array1<f64>,
}

pub struct LinearCache {
    x: Array2<f64>,
}

impl Linear {
    pub fn new<R: Rng>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        let mut w = Array2::zeros((out_features, in_features));
        kaiming_uniform(w.as_slice_mut().unwrap(), in_features, rng);
        Linear {
            w,
            b: Array1::zeros(out_features),
            gw: Array2::zeros((out_features, in_features)),
            gb: Array1::zeros(out_features),
        }
    }

    /// `x` is `(batch, in_features)`.
    pub fn forward(&self, x: Array2<f64>) -> (Array2<f64>, LinearCache) {
        let y = x.dot(&self.w.t()) + &self.b;
        (y, LinearCache { x })
    }

    pub fn backward(&mut self, cache: LinearCache, gy: &Array2<f64>) -> Array2<f64> {
        self.gw += &gy.t().dot(&cache.x);
        self.gb += &gy.sum_axis(Axis(0));
        gy.dot(&self.w)
    }

    pub fn zero_grad(&mut self) {
        self.gw.fill(0.0);
        self.gb.fill(0.0);
    }

    pub fn collect<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        out.push(ParamRef {
            name: format!("{prefix}.w"),
            value: self.w.as_slice_mut().unwrap(),
            grad: self.gw.as_slice_mut().unwrap(),
        });
        out.push(ParamRef {
            name: format!("{prefix}.b"),
            value: self.b.as_slice_mut().unwrap(),
            grad: self.gb.as_slice_mut().unwrap(),
        });
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }
}
