//! Elementwise activations with explicit backward passes.

use ndarray::{Array, Dimension, Zip};

pub fn relu<D: Dimension>(x: &Array<f64, D>) -> Array<f64, D> {
    x.mapv(|v| v.max(0.0))
}

/// Gradient through ReLU given the forward *input*.
pub fn relu_backward<D: Dimension>(x: &Array<f64, D>, gy: &Array<f64, D>) -> Array<f64, D> {
    Zip::from(x)
        .and(gy)
        .map_collect(|&xv, &g| if xv > 0.0 { g } else { 0.0 })
}

pub fn sigmoid<D: Dimension>(x: &Array<f64, D>) -> Array<f64, D> {
    x.mapv(|v| 1.0 / (1.0 + (-v).exp()))
}

/// Gradient through the logistic function given the forward *output*.
pub fn sigmoid_backward<D: Dimension>(y: &Array<f64, D>, gy: &Array<f64, D>) -> Array<f64, D> {
    Zip::from(y)
        .and(gy)
        .map_collect(|&yv, &g| g * yv * (1.0 - yv))
}

pub fn tanh<D: Dimension>(x: &Array<f64, D>) -> Array<f64, D> {
    x.mapv(f64::tanh)
}

/// Gradient through tanh given the forward *output*.
pub fn tanh_backward<D: Dimension>(y: &Array<f64, D>, gy: &Array<f64, D>) -> Array<f64, D> {
    Zip::from(y)
        .and(gy)
        .map_collect(|&yv, &g| g * (1.0 - yv * yv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn forward_values() {
        let x = array![[-1.0, 0.0, 2.0]];
        assert_eq!(relu(&x), array![[0.0, 0.0, 2.0]]);
        let s = sigmoid(&x);
        assert!((s[[0, 1]] - 0.5).abs() < 1e-15);
        assert!((s[[0, 2]] - 1.0 / (1.0 + (-2.0f64).exp())).abs() < 1e-15);
        assert!((tanh(&x)[[0, 2]] - 2.0f64.tanh()).abs() < 1e-15);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let x = array![[-0.7, 0.3, 1.4, -0.1]];
        let gy = array![[1.0, 1.0, 1.0, 1.0]];
        let h = 1e-6;
        for j in 0..4 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[[0, j]] += h;
            xm[[0, j]] -= h;

            let fd = (relu(&xp).sum() - relu(&xm).sum()) / (2.0 * h);
            assert!((relu_backward(&x, &gy)[[0, j]] - fd).abs() < 1e-6);

            let fd = (sigmoid(&xp).sum() - sigmoid(&xm).sum()) / (2.0 * h);
            assert!((sigmoid_backward(&sigmoid(&x), &gy)[[0, j]] - fd).abs() < 1e-6);

            let fd = (tanh(&xp).sum() - tanh(&xm).sum()) / (2.0 * h);
            assert!((tanh_backward(&tanh(&x), &gy)[[0, j]] - fd).abs() < 1e-6);
        }
    }
}
