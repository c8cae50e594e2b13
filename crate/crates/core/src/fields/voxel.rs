//! Dense voxel grid storing a raw density and a feature vector per vertex.

use rand::Rng;

use super::grid::{uniform_init, Aabb, Trilerp};
use super::mlp::{sigmoid, softplus};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelField {
    pub bbox: Aabb,
    pub dims: [usize; 3],
    pub feature_dim: usize,
    pub density_shift: f64,
    /// `(1 + feature_dim)` channels per vertex, vertex-major.
    pub params: Vec<f64>,
}

impl VoxelField {
    pub fn new(bbox: Aabb, dims: [usize; 3], feature_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        if dims.iter().any(|&n| n < 2) {
            return Err(Error::Config("voxel grid needs at least 2 vertices per axis".into()));
        }
        let n = dims.iter().product::<usize>() * (1 + feature_dim);
        Ok(Self {
            bbox,
            dims,
            feature_dim,
            density_shift: 0.0,
            params: uniform_init(n, 0.0, 1e-2, rng),
        })
    }

    #[inline]
    fn channels(&self) -> usize {
        1 + self.feature_dim
    }

    pub fn query(&self, p: &[f64; 3]) -> Option<(f64, Vec<f64>)> {
        if !self.bbox.contains(p) {
            return None;
        }
        let t = Trilerp::new(&self.bbox.unit(p), self.dims);
        let c = self.channels();
        let mut raw = vec![0.0; c];
        for (idx, w) in t.index.iter().zip(&t.weight) {
            let v = &self.params[idx * c..(idx + 1) * c];
            for (r, x) in raw.iter_mut().zip(v) {
                *r += w * x;
            }
        }
        let sigma = softplus(raw[0] + self.density_shift);
        raw.remove(0);
        Some((sigma, raw))
    }

    pub fn backward(&self, p: &[f64; 3], d_sigma: f64, d_feature: &[f64], grad: &mut [f64], dp: &mut [f64; 3]) {
        if !self.bbox.contains(p) {
            return;
        }
        let t = Trilerp::new(&self.bbox.unit(p), self.dims);
        let c = self.channels();
        let mut raw0 = 0.0;
        for (idx, w) in t.index.iter().zip(&t.weight) {
            raw0 += w * self.params[idx * c];
        }
        let mut g = Vec::with_capacity(c);
        g.push(d_sigma * sigmoid(raw0 + self.density_shift));
        g.extend_from_slice(d_feature);
        let ext = self.bbox.extent();
        for k in 0..8 {
            let base = t.index[k] * c;
            let mut dv = 0.0;
            for ch in 0..c {
                grad[base + ch] += t.weight[k] * g[ch];
                dv += g[ch] * self.params[base + ch];
            }
            for a in 0..3 {
                dp[a] += dv * t.dweight[k][a] / ext[a];
            }
        }
    }

    /// Raw (pre-activation) values at a vertex; used by dense oracles.
    pub fn vertex(&self, i: usize, j: usize, k: usize) -> &[f64] {
        let c = self.channels();
        let idx = (i * self.dims[1] + j) * self.dims[2] + k;
        &self.params[idx * c..(idx + 1) * c]
    }
}
