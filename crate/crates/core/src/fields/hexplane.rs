//! Six-plane space-time factorization decoded into a 3D displacement.
//!
//! Per level, `h = S_xy * S_yz * S_xz * S_xt * S_yt * S_zt` (elementwise) over
//! bilinearly interpolated plane features; levels are summed and decoded by a
//! two-layer network into `dp`.

use rand::Rng;

use super::grid::{bilerp, bilerp_scatter, uniform_init, Aabb, Lerp};
use super::mlp::Mlp;
use crate::error::{Error, Result};

/// Coordinate pairs of the six planes; index 3 is time.
pub const PLANES: [[usize; 2]; 6] = [[0, 1], [1, 2], [0, 2], [0, 3], [1, 3], [2, 3]];

#[derive(Debug, Clone, PartialEq)]
pub struct HexPlaneField {
    pub bbox: Aabb,
    /// Spatial resolution per level.
    pub resolutions: Vec<usize>,
    pub time_resolution: usize,
    pub feature_dim: usize,
    /// Number of frames; time `t` is normalized by `frames - 1`.
    pub frames: usize,
    /// Reference frame of the canonical volume.
    pub canonical_time: f64,
    pub planes: Vec<f64>,
    pub decoder: Mlp,
}

impl HexPlaneField {
    pub fn new(
        bbox: Aabb,
        resolutions: Vec<usize>,
        time_resolution: usize,
        feature_dim: usize,
        frames: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if resolutions.is_empty() || resolutions.iter().any(|&r| r < 2) || time_resolution < 2 {
            return Err(Error::Config("hexplane levels need at least 2 nodes per axis".into()));
        }
        let mut f = Self {
            bbox,
            resolutions,
            time_resolution,
            feature_dim,
            frames: frames.max(1),
            canonical_time: ((frames.max(1) - 1) / 2) as f64,
            planes: Vec::new(),
            decoder: Mlp::init(feature_dim, hidden, 3, rng),
        };
        // planes start near one so the six-way product neither vanishes nor
        // kills gradients; the decoder starts as the zero map
        f.planes = uniform_init(f.param_count(), 1.0, 1e-2, rng);
        f.decoder.zero_output_layer();
        Ok(f)
    }

    fn axis_len(&self, level: usize, axis: usize) -> usize {
        if axis == 3 {
            self.time_resolution
        } else {
            self.resolutions[level]
        }
    }

    fn plane_len(&self, level: usize, k: usize) -> usize {
        let [a, b] = PLANES[k];
        self.axis_len(level, a) * self.axis_len(level, b) * self.feature_dim
    }

    fn param_count(&self) -> usize {
        (0..self.resolutions.len())
            .map(|l| (0..6).map(|k| self.plane_len(l, k)).sum::<usize>())
            .sum()
    }

    /// Offset of plane `k` on `level`.
    fn plane_offset(&self, level: usize, k: usize) -> usize {
        let mut off = 0;
        for l in 0..level {
            for kk in 0..6 {
                off += self.plane_len(l, kk);
            }
        }
        for kk in 0..k {
            off += self.plane_len(level, kk);
        }
        off
    }

    fn coords(&self, p: &[f64; 3], t: f64) -> [f64; 4] {
        let u = self.bbox.unit(p);
        let tn = if self.frames > 1 { t / (self.frames - 1) as f64 } else { 0.0 };
        [u[0].clamp(0.0, 1.0), u[1].clamp(0.0, 1.0), u[2].clamp(0.0, 1.0), tn.clamp(0.0, 1.0)]
    }

    /// Per-level, per-plane interpolated features.
    fn plane_values(&self, q: &[f64; 4]) -> Vec<[Vec<f64>; 6]> {
        let fd = self.feature_dim;
        (0..self.resolutions.len())
            .map(|l| {
                let lerps = [0, 1, 2, 3].map(|a| Lerp::new(q[a], self.axis_len(l, a)));
                std::array::from_fn(|k| {
                    let [a, b] = PLANES[k];
                    let off = self.plane_offset(l, k);
                    let plane = &self.planes[off..off + self.plane_len(l, k)];
                    (0..fd)
                        .map(|c| bilerp(plane, self.axis_len(l, b), fd, &lerps[a], &lerps[b], c).0)
                        .collect()
                })
            })
            .collect()
    }

    /// Summed Hadamard features.
    pub fn features(&self, p: &[f64; 3], t: f64) -> Vec<f64> {
        let mut h = vec![0.0; self.feature_dim];
        for level in self.plane_values(&self.coords(p, t)) {
            for c in 0..self.feature_dim {
                h[c] += level.iter().map(|v| v[c]).product::<f64>();
            }
        }
        h
    }

    /// Displacement `dp` mapping a sample at time `t` into the canonical
    /// volume. `cache` receives the decoder cache.
    pub fn query(&self, p: &[f64; 3], t: f64, cache: &mut Vec<f64>) -> [f64; 3] {
        let h = self.features(p, t);
        let mut out = [0.0; 3];
        self.decoder.forward(&h, cache, &mut out);
        out
    }

    /// Adds gradients into `[planes, decoder]`.
    pub fn backward(&self, p: &[f64; 3], t: f64, cache: &[f64], d_dp: &[f64; 3], grads: &mut [Vec<f64>]) {
        let fd = self.feature_dim;
        let mut dh = vec![0.0; fd];
        let (gp, gd) = grads.split_at_mut(1);
        self.decoder.backward(cache, d_dp, &mut gd[0], Some(&mut dh));
        let q = self.coords(p, t);
        let vals = self.plane_values(&q);
        for (l, level) in vals.iter().enumerate() {
            let lerps = [0, 1, 2, 3].map(|a| Lerp::new(q[a], self.axis_len(l, a)));
            for k in 0..6 {
                let [a, b] = PLANES[k];
                let off = self.plane_offset(l, k);
                let len = self.plane_len(l, k);
                for c in 0..fd {
                    let others: f64 = (0..6).filter(|&kk| kk != k).map(|kk| level[kk][c]).product();
                    let g = dh[c] * others;
                    if g != 0.0 {
                        bilerp_scatter(&mut gp[0][off..off + len], self.axis_len(l, b), fd, &lerps[a], &lerps[b], c, g);
                    }
                }
            }
        }
    }
}
