//! Small shared helpers.

/// 64-bit FNV-1a over a byte slice. Used for manifest/cache/checkpoint
/// content hashes; not cryptographic.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Incremental FNV-1a hasher for streaming record checksums.
pub struct Fnv1a64(u64);

impl Fnv1a64 {
    pub fn new() -> Self {
        Fnv1a64(0xcbf2_9ce4_8422_2325)
    }

    pub fn update(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

impl Default for Fnv1a64 {
    fn default() -> Self {
        Self::new()
    }
}

/// Derive a child seed from a master seed and a purpose tag, so independent
/// random streams (splits, init, shuffling, sampling) never collide.
pub fn derive_seed(master: u64, tag: &str) -> u64 {
    let mut bytes = Vec::with_capacity(8 + tag.len());
    bytes.extend_from_slice(&master.to_le_bytes());
    bytes.extend_from_slice(tag.as_bytes());
    fnv1a64(&bytes)
}

/// log(sum(exp(x))) without overflow. Empty input and all `-inf` both give
/// `-inf`; a `+inf` entry propagates.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m; // -inf for empty/all-minus-inf, +inf or NaN propagate
    }
    let sum: f64 = xs.iter().map(|&x| (x - m).exp()).sum();
    m + sum.ln()
}
