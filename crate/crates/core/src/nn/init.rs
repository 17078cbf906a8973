//! Weight initialisation: uniform schemes scaled by fan-in/fan-out.

use rand::Rng;

/// He/Kaiming uniform for ReLU networks: U(-b, b) with `b = sqrt(6/fan_in)`.
pub fn kaiming_uniform<R: Rng>(slice: &mut [f64], fan_in: usize, rng: &mut R) {
    assert!(fan_in > 0, "fan_in must be positive");
    let bound = (6.0 / fan_in as f64).sqrt();
    for v in slice.iter_mut() {
        *v = rng.random_range(-bound..bound);
    }
}

/// Glorot/Xavier uniform: U(-b, b) with `b = sqrt(6/(fan_in + fan_out))`.
pub fn xavier_uniform<R: Rng>(slice: &mut [f64], fan_in: usize, fan_out: usize, rng: &mut R) {
    assert!(fan_in + fan_out > 0, "fans must be positive");
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    for v in slice.iter_mut() {
        *v = rng.random_range(-bound..bound);
    }
}
