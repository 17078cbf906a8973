//! Adam optimizer over an explicitly collected parameter list.

use super::ParamRef;
use crate::error::{Error, Result};

pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Step counter for bias correction.
    pub t: u64,
    /// First/second moment estimates, indexed like the parameter list.
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update over `params` at learning rate `lr`. Moment buffers are
    /// created on first use and must keep matching the parameter list — a
    /// mismatch means the caller rebuilt the model without resetting the
    /// optimizer, which is an error, not something to paper over.
    pub fn step(&mut self, params: &mut [ParamRef<'_>], lr: f64) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        }
        if self.m.len() != params.len() {
            return Err(Error::InvalidArg(format!(
                "optimizer tracks {} tensors but was given {}",
                self.m.len(),
                params.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            if self.m[i].len() != p.value.len() {
                return Err(Error::InvalidArg(format!(
                    "optimizer state for {} has length {}, parameter has {}",
                    p.name,
                    self.m[i].len(),
                    p.value.len()
                )));
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..p.value.len() {
                let g = p.grad[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p.value[j] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

impl Default for Adam {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_matches_hand_arithmetic() {
        // p=1, g=2, lr=0.1: m=0.2, v=0.004, m_hat=2, v_hat=4,
        // update = 0.1 * 2/(2+eps) ~= 0.1.
        let mut p = vec![1.0];
        let mut g = vec![2.0];
        let mut adam = Adam::new();
        let mut refs = vec![ParamRef {
            name: "p".into(),
            value: &mut p,
            grad: &mut g,
        }];
        adam.step(&mut refs, 0.1).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = vec![3.0, -2.0];
        let mut adam = Adam::new();
        for _ in 0..2000 {
            let mut g = vec![2.0 * p[0], 2.0 * p[1]];
            let mut refs = vec![ParamRef {
                name: "p".into(),
                value: &mut p,
                grad: &mut g,
            }];
            adam.step(&mut refs, 0.05).unwrap();
        }
        assert!(p[0].abs() < 1e-4 && p[1].abs() < 1e-4, "{p:?}");
    }

    #[test]
    fn mismatched_state_is_rejected() {
        let mut p = vec![1.0];
        let mut g = vec![0.5];
        let mut adam = Adam::new();
        let mut refs = vec![ParamRef {
            name: "p".into(),
            value: &mut p,
            grad: &mut g,
        }];
        adam.step(&mut refs, 0.1).unwrap();
        let mut p2 = vec![1.0, 2.0];
        let mut g2 = vec![0.5, 0.5];
        let mut refs = vec![ParamRef {
            name: "a".into(),
            value: &mut p2,
            grad: &mut g2,
        }];
        assert!(adam.step(&mut refs, 0.1).is_err());
    }
}
