//! Sinusoidal positional encoding of small coordinate vectors.

use std::f64::consts::PI;

/// Output width for a `dim`-vector with `bands` frequency bands.
pub fn encoded_dim(dim: usize, bands: usize) -> usize {
    dim * (1 + 2 * bands)
}

/// `[x, sin(2⁰πx), cos(2⁰πx), …, sin(2^{L−1}πx), cos(2^{L−1}πx)]`, with the
/// raw coordinates first and each band laid out coordinate-major.
pub fn encode_into(x: &[f64], bands: usize, out: &mut [f64]) {
    let d = x.len();
    out[..d].copy_from_slice(x);
    for k in 0..bands {
        let f = PI * (1u64 << k) as f64;
        for (j, v) in x.iter().enumerate() {
            let (s, c) = (f * v).sin_cos();
            let base = d + 2 * (k * d + j);
            out[base] = s;
            out[base + 1] = c;
        }
    }
}

pub fn encode(x: &[f64], bands: usize) -> Vec<f64> {
    let mut out = vec![0.0; encoded_dim(x.len(), bands)];
    encode_into(x, bands, &mut out);
    out
}

/// Adjoint of [`encode`]: gradient on the encoding to gradient on `x`.
pub fn encode_backward(x: &[f64], bands: usize, d_out: &[f64]) -> Vec<f64> {
    let d = x.len();
    let mut dx = d_out[..d].to_vec();
    for k in 0..bands {
        let f = PI * (1u64 << k) as f64;
        for (j, v) in x.iter().enumerate() {
            let (s, c) = (f * v).sin_cos();
            let base = d + 2 * (k * d + j);
            dx[j] += f * (c * d_out[base] - s * d_out[base + 1]);
        }
    }
    dx
}
