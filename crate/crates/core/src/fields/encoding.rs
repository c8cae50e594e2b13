//! Sinusoidal positional encoding.

use crate::error::{Error, Result};

/// Number of encoded entries for a `dims`-vector over frequencies `d1..d2`.
pub fn encoded_len(dims: usize, d1: usize, d2: usize) -> usize {
    let raw = if d1 == 0 { dims } else { 0 };
    raw + 2 * dims * (d2 - d1)
}

/// Encodes `x` with frequencies `2^d1 .. 2^(d2-1)`.
///
/// Layout: the raw input first (only when `d1 == 0`), then for every
/// frequency the sines of all coordinates followed by their cosines.
pub fn positional_encode(x: &[f64], d1: usize, d2: usize) -> Result<Vec<f64>> {
    if d1 >= d2 {
        return Err(Error::InvalidRange { d1, d2 });
    }
    let mut out = Vec::with_capacity(encoded_len(x.len(), d1, d2));
    encode_into(x, d1, d2, &mut out);
    Ok(out)
}

/// Appends the encoding to `out` without validating the range. With
/// `d1 == d2 == 0` only the raw input is written.
pub fn encode_into(x: &[f64], d1: usize, d2: usize, out: &mut Vec<f64>) {
    if d1 == 0 {
        out.extend_from_slice(x);
    }
    for l in d1..d2 {
        let f = (1u64 << l) as f64;
        for &v in x {
            out.push((f * v).sin());
        }
        for &v in x {
            out.push((f * v).cos());
        }
    }
}

/// Chain rule through [`encode_into`]: adds `d(out)/d(x)^T * g` to `dx`.
pub fn encode_backward(x: &[f64], d1: usize, d2: usize, g: &[f64], dx: &mut [f64]) {
    let n = x.len();
    let mut k = 0;
    if d1 == 0 {
        for i in 0..n {
            dx[i] += g[i];
        }
        k = n;
    }
    for l in d1..d2 {
        let f = (1u64 << l) as f64;
        for i in 0..n {
            dx[i] += g[k + i] * f * (f * x[i]).cos();
        }
        k += n;
        for i in 0..n {
            dx[i] -= g[k + i] * f * (f * x[i]).sin();
        }
        k += n;
    }
}
