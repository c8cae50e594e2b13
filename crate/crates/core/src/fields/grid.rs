//! Bounding boxes and multilinear interpolation helpers shared by the grid
//! families.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self> {
        for a in 0..3 {
            if !(max[a] > min[a]) || !min[a].is_finite() || !max[a].is_finite() {
                return Err(Error::Config(format!("degenerate bounding box on axis {a}")));
            }
        }
        Ok(Self { min, max })
    }

    #[inline]
    pub fn contains(&self, p: &[f64; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    #[inline]
    pub fn extent(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| self.max[a] - self.min[a])
    }

    /// Coordinates in `[0, 1]^3` over the box.
    #[inline]
    pub fn unit(&self, p: &[f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|a| (p[a] - self.min[a]) / (self.max[a] - self.min[a]))
    }

    /// Coordinates in `[-1, 1]^3` over the box.
    #[inline]
    pub fn signed(&self, p: &[f64; 3]) -> [f64; 3] {
        self.unit(p).map(|u| 2.0 * u - 1.0)
    }

    pub fn diagonal(&self) -> f64 {
        self.extent().iter().map(|e| e * e).sum::<f64>().sqrt()
    }
}

/// Linear interpolation stencil on `n` nodes spanning `[0, 1]`.
#[derive(Debug, Clone, Copy)]
pub struct Lerp {
    pub i0: usize,
    pub f: f64,
    /// d(grid coordinate)/d(unit coordinate).
    pub scale: f64,
}

impl Lerp {
    #[inline]
    pub fn new(u: f64, n: usize) -> Self {
        let scale = (n - 1) as f64;
        let g = (u * scale).clamp(0.0, scale);
        let i0 = (g.floor() as usize).min(n - 2);
        Self { i0, f: g - i0 as f64, scale }
    }

    #[inline]
    pub fn weights(&self) -> [f64; 2] {
        [1.0 - self.f, self.f]
    }

    #[inline]
    pub fn eval(&self, a: &[f64], stride: usize) -> f64 {
        (1.0 - self.f) * a[self.i0 * stride] + self.f * a[(self.i0 + 1) * stride]
    }

    /// Derivative of [`Lerp::eval`] w.r.t. the unit coordinate.
    #[inline]
    pub fn slope(&self, a: &[f64], stride: usize) -> f64 {
        (a[(self.i0 + 1) * stride] - a[self.i0 * stride]) * self.scale
    }
}

/// Bilinear value and unit-coordinate gradient of a row-major `nu x nv` plane
/// with `c` interleaved channels (channel `ch`).
#[inline]
pub fn bilerp(plane: &[f64], nv: usize, c: usize, lu: &Lerp, lv: &Lerp, ch: usize) -> (f64, f64, f64) {
    let at = |i: usize, j: usize| plane[(i * nv + j) * c + ch];
    let (i, j) = (lu.i0, lv.i0);
    let (a, b, cc, d) = (at(i, j), at(i, j + 1), at(i + 1, j), at(i + 1, j + 1));
    let (fu, fv) = (lu.f, lv.f);
    let v = (1.0 - fu) * ((1.0 - fv) * a + fv * b) + fu * ((1.0 - fv) * cc + fv * d);
    let du = ((1.0 - fv) * (cc - a) + fv * (d - b)) * lu.scale;
    let dv = ((1.0 - fu) * (b - a) + fu * (d - cc)) * lv.scale;
    (v, du, dv)
}

/// Adds `g` times the bilinear weights of channel `ch` into `grad`.
#[inline]
pub fn bilerp_scatter(grad: &mut [f64], nv: usize, c: usize, lu: &Lerp, lv: &Lerp, ch: usize, g: f64) {
    let (i, j) = (lu.i0, lv.i0);
    let (fu, fv) = (lu.f, lv.f);
    grad[(i * nv + j) * c + ch] += g * (1.0 - fu) * (1.0 - fv);
    grad[(i * nv + j + 1) * c + ch] += g * (1.0 - fu) * fv;
    grad[((i + 1) * nv + j) * c + ch] += g * fu * (1.0 - fv);
    grad[((i + 1) * nv + j + 1) * c + ch] += g * fu * fv;
}

/// Trilinear stencil over a `dims` vertex grid addressed as `(i*J + j)*K + k`.
#[derive(Debug, Clone, Copy)]
pub struct Trilerp {
    pub index: [usize; 8],
    pub weight: [f64; 8],
    /// Weight derivatives w.r.t. the unit coordinates.
    pub dweight: [[f64; 3]; 8],
}

impl Trilerp {
    pub fn new(u: &[f64; 3], dims: [usize; 3]) -> Self {
        let l = [0, 1, 2].map(|a| Lerp::new(u[a], dims[a]));
        let mut index = [0; 8];
        let mut weight = [0.0; 8];
        let mut dweight = [[0.0; 3]; 8];
        for c in 0..8 {
            let o = [c >> 2 & 1, c >> 1 & 1, c & 1];
            let w1 = [0, 1, 2].map(|a| if o[a] == 1 { l[a].f } else { 1.0 - l[a].f });
            let dw1 = [0, 1, 2].map(|a| if o[a] == 1 { l[a].scale } else { -l[a].scale });
            let (i, j, k) = (l[0].i0 + o[0], l[1].i0 + o[1], l[2].i0 + o[2]);
            index[c] = (i * dims[1] + j) * dims[2] + k;
            weight[c] = w1[0] * w1[1] * w1[2];
            dweight[c] = [dw1[0] * w1[1] * w1[2], w1[0] * dw1[1] * w1[2], w1[0] * w1[1] * dw1[2]];
        }
        Self { index, weight, dweight }
    }
}

pub(crate) fn uniform_init(n: usize, center: f64, radius: f64, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| center + rng.gen_range(-radius..radius)).collect()
}
