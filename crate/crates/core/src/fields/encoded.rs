//! Coordinate network: positional encoding of the normalized position fed to
//! a two-layer density/feature network.

use rand::Rng;

use super::encoding::{encode_backward, encode_into, encoded_len};
use super::grid::Aabb;
use super::mlp::{sigmoid, softplus, Mlp};

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedField {
    pub bbox: Aabb,
    /// Highest position frequency `l_p` fed to the density network.
    pub degrees: usize,
    pub feature_dim: usize,
    pub density_shift: f64,
    pub mlp: Mlp,
}

impl EncodedField {
    pub fn new(bbox: Aabb, degrees: usize, feature_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            bbox,
            degrees,
            feature_dim,
            density_shift: 0.0,
            mlp: Mlp::init(encoded_len(3, 0, degrees), hidden, 1 + feature_dim, rng),
        }
    }

    pub fn query(&self, p: &[f64; 3], cache: &mut Vec<f64>) -> Option<(f64, Vec<f64>)> {
        if !self.bbox.contains(p) {
            return None;
        }
        let mut x = Vec::with_capacity(self.mlp.n_in);
        encode_into(&self.bbox.signed(p), 0, self.degrees, &mut x);
        let mut out = vec![0.0; self.mlp.n_out];
        self.mlp.forward(&x, cache, &mut out);
        cache.extend_from_slice(&out);
        Some((softplus(out[0] + self.density_shift), out[1..].to_vec()))
    }

    pub fn backward(
        &self,
        p: &[f64; 3],
        cache: &[f64],
        d_sigma: f64,
        d_feature: &[f64],
        grad: &mut [f64],
        dp: &mut [f64; 3],
    ) {
        if !self.bbox.contains(p) {
            return;
        }
        let raw0 = cache[self.mlp.n_in + self.mlp.hidden];
        let mut dy = Vec::with_capacity(self.mlp.n_out);
        dy.push(d_sigma * sigmoid(raw0 + self.density_shift));
        dy.extend_from_slice(d_feature);
        let mut dx = vec![0.0; self.mlp.n_in];
        self.mlp.backward(cache, &dy, grad, Some(&mut dx));
        let mut ds = [0.0; 3];
        encode_backward(&self.bbox.signed(p), 0, self.degrees, &dx, &mut ds);
        let e = self.bbox.extent();
        for a in 0..3 {
            dp[a] += ds[a] * 2.0 / e[a];
        }
    }
}
