//! Multiresolution hash-grid encoding followed by a small density network.
//!
//! x and y are normalized linearly over the box; z is normalized in inverse
//! depth so resolution concentrates near the cameras.

use rand::Rng;

use super::grid::{uniform_init, Aabb, Trilerp};
use super::mlp::{sigmoid, softplus, Mlp};
use crate::error::{Error, Result};

pub const PRIMES: [u32; 3] = [1, 2_654_435_761, 805_459_861];

#[derive(Debug, Clone, PartialEq)]
pub struct HashField {
    pub bbox: Aabb,
    pub levels: usize,
    pub features_per_level: usize,
    pub log2_table: u32,
    pub base_resolution: usize,
    pub max_resolution: usize,
    /// Lower bound of the sampling interval in normalized inverse depth.
    pub s_near: f64,
    pub feature_dim: usize,
    pub density_shift: f64,
    /// `levels x table x features_per_level`.
    pub tables: Vec<f64>,
    pub mlp: Mlp,
}

#[derive(Debug, Clone, Copy)]
pub struct HashConfig {
    pub levels: usize,
    pub features_per_level: usize,
    pub log2_table: u32,
    pub base_resolution: usize,
    pub max_resolution: usize,
    pub s_near: f64,
    pub feature_dim: usize,
    pub hidden: usize,
}

impl HashField {
    pub fn new(bbox: Aabb, cfg: HashConfig, rng: &mut impl Rng) -> Result<Self> {
        if bbox.min[2] <= 0.0 {
            return Err(Error::Config("hash field needs a box with positive z for the inverse-depth map".into()));
        }
        if !(0.0..1.0).contains(&cfg.s_near) {
            return Err(Error::Config("s_near must lie in [0, 1)".into()));
        }
        if cfg.levels == 0 || cfg.log2_table == 0 || cfg.log2_table > 31 {
            return Err(Error::Config("hash field needs at least one level and 1 <= log2 T <= 31".into()));
        }
        let mut f = Self {
            bbox,
            levels: cfg.levels,
            features_per_level: cfg.features_per_level,
            log2_table: cfg.log2_table,
            base_resolution: cfg.base_resolution,
            max_resolution: cfg.max_resolution,
            s_near: cfg.s_near,
            feature_dim: cfg.feature_dim,
            density_shift: 0.0,
            tables: Vec::new(),
            mlp: Mlp::init(cfg.levels * cfg.features_per_level, cfg.hidden, 1 + cfg.feature_dim, rng),
        };
        let res = f.resolutions();
        if res.windows(2).any(|w| w[1] <= w[0]) || res[0] == 0 {
            return Err(Error::Config(format!("hash level resolutions must strictly increase: {res:?}")));
        }
        f.tables = uniform_init(cfg.levels * f.table_size() * cfg.features_per_level, 0.0, 1e-2, rng);
        Ok(f)
    }

    #[inline]
    pub fn table_size(&self) -> usize {
        1usize << self.log2_table
    }

    /// Per-level grid resolution `floor(N_min * b^l)`.
    pub fn resolutions(&self) -> Vec<usize> {
        if self.levels == 1 {
            return vec![self.base_resolution];
        }
        let b = ((self.max_resolution as f64).ln() - (self.base_resolution as f64).ln()) / (self.levels - 1) as f64;
        (0..self.levels)
            .map(|l| (self.base_resolution as f64 * (b * l as f64).exp() + 1e-9).floor() as usize)
            .collect()
    }

    /// Normalized coordinates and their derivative w.r.t. world position.
    fn normalize(&self, p: &[f64; 3]) -> ([f64; 3], [f64; 3]) {
        let e = self.bbox.extent();
        let (z1, z2) = (self.bbox.min[2], self.bbox.max[2]);
        let denom = 1.0 / z2 - 1.0 / z1;
        let uz = (1.0 / p[2] - 1.0 / z1) / denom;
        let duz = -1.0 / (p[2] * p[2] * denom);
        (
            [(p[0] - self.bbox.min[0]) / e[0], (p[1] - self.bbox.min[1]) / e[1], uz],
            [1.0 / e[0], 1.0 / e[1], duz],
        )
    }

    /// Table slot of an integer vertex on a level with resolution `res`.
    #[inline]
    pub fn slot(&self, v: [usize; 3], res: usize) -> usize {
        let t = self.table_size();
        let n = res + 1;
        if n.checked_pow(3).is_some_and(|c| c <= t) {
            (v[2] * n + v[1]) * n + v[0]
        } else {
            let h = (v[0] as u32).wrapping_mul(PRIMES[0])
                ^ (v[1] as u32).wrapping_mul(PRIMES[1])
                ^ (v[2] as u32).wrapping_mul(PRIMES[2]);
            (h as usize) & (t - 1)
        }
    }

    /// Per-level stencils: table rows and trilinear weights.
    fn stencils(&self, u: &[f64; 3]) -> Vec<([usize; 8], Trilerp)> {
        self.resolutions()
            .iter()
            .map(|&res| {
                let n = res + 1;
                let t = Trilerp::new(u, [n, n, n]);
                let mut slots = [0; 8];
                for c in 0..8 {
                    let idx = t.index[c];
                    let v = [idx / (n * n), (idx / n) % n, idx % n];
                    slots[c] = self.slot(v, res);
                }
                (slots, t)
            })
            .collect()
    }

    fn encode(&self, u: &[f64; 3]) -> Vec<f64> {
        let f = self.features_per_level;
        let ts = self.table_size();
        let mut x = vec![0.0; self.levels * f];
        for (l, (slots, t)) in self.stencils(u).iter().enumerate() {
            let table = &self.tables[l * ts * f..(l + 1) * ts * f];
            for c in 0..8 {
                let row = &table[slots[c] * f..(slots[c] + 1) * f];
                for k in 0..f {
                    x[l * f + k] += t.weight[c] * row[k];
                }
            }
        }
        x
    }

    /// `cache` receives the network cache followed by the raw outputs.
    pub fn query(&self, p: &[f64; 3], cache: &mut Vec<f64>) -> Option<(f64, Vec<f64>)> {
        if !self.bbox.contains(p) {
            return None;
        }
        let (u, _) = self.normalize(p);
        let x = self.encode(&u);
        let mut out = vec![0.0; self.mlp.n_out];
        self.mlp.forward(&x, cache, &mut out);
        cache.extend_from_slice(&out);
        let sigma = softplus(out[0] + self.density_shift);
        Some((sigma, out[1..].to_vec()))
    }

    /// Adds gradients into `[tables, mlp]`.
    pub fn backward(
        &self,
        p: &[f64; 3],
        cache: &[f64],
        d_sigma: f64,
        d_feature: &[f64],
        grads: &mut [Vec<f64>],
        dp: &mut [f64; 3],
    ) {
        if !self.bbox.contains(p) {
            return;
        }
        let (u, du) = self.normalize(p);
        let n_cache = self.mlp.n_in + self.mlp.hidden;
        let raw0 = cache[n_cache];
        let mut dy = Vec::with_capacity(self.mlp.n_out);
        dy.push(d_sigma * sigmoid(raw0 + self.density_shift));
        dy.extend_from_slice(d_feature);
        let mut dx = vec![0.0; self.mlp.n_in];
        let (gt, gm) = grads.split_at_mut(1);
        self.mlp.backward(cache, &dy, &mut gm[0], Some(&mut dx));
        let f = self.features_per_level;
        let ts = self.table_size();
        for (l, (slots, t)) in self.stencils(&u).iter().enumerate() {
            let off = l * ts * f;
            for c in 0..8 {
                let base = off + slots[c] * f;
                let mut dw = 0.0;
                for k in 0..f {
                    gt[0][base + k] += t.weight[c] * dx[l * f + k];
                    dw += dx[l * f + k] * self.tables[base + k];
                }
                for a in 0..3 {
                    dp[a] += dw * t.dweight[c][a] * du[a];
                }
            }
        }
    }
}
