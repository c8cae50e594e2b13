//! Vector-matrix factorized density and appearance tensors.
//!
//! `G(p) = sum_r v^X_r(x) M^YZ_r(y,z) + v^Y_r(y) M^XZ_r(x,z) + v^Z_r(z) M^XY_r(x,y)`
//! for density (then `sigma = sigma_max * sigmoid(G + shift)`); the color
//! tensor keeps the `3 R_c` component values apart and mixes them with the
//! appearance vectors into the feature `h`.

use rand::Rng;

use super::grid::{bilerp, bilerp_scatter, uniform_init, Aabb, Lerp};
use super::mlp::sigmoid;
use crate::error::{Error, Result};

pub const DEFAULT_SIGMA_MAX: f64 = 200.0;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorField {
    pub bbox: Aabb,
    pub dims: [usize; 3],
    pub rank_density: usize,
    pub rank_color: usize,
    pub feature_dim: usize,
    pub sigma_max: f64,
    pub density_shift: f64,
    pub density: Vec<f64>,
    pub color: Vec<f64>,
    /// Appearance vectors as a `feature_dim x 3 R_c` row-major matrix; column
    /// `3 r + m` holds the vector paired with component `r`, mode `m`.
    pub basis: Vec<f64>,
}

/// Offsets of the six factors inside one rank's block.
#[derive(Debug, Clone, Copy)]
struct Layout {
    vec: [usize; 3],
    mat: [usize; 3],
    stride: usize,
}

impl Layout {
    fn new(d: [usize; 3]) -> Self {
        let [i, j, k] = d;
        let vx = 0;
        let vy = vx + i;
        let vz = vy + j;
        let myz = vz + k;
        let mxz = myz + j * k;
        let mxy = mxz + i * k;
        Self {
            vec: [vx, vy, vz],
            mat: [myz, mxz, mxy],
            stride: mxy + i * j,
        }
    }
}

/// Axes of the matrix paired with the vector along axis `m`.
const PLANE_AXES: [[usize; 2]; 3] = [[1, 2], [0, 2], [0, 1]];

struct Stencil {
    l: [Lerp; 3],
}

impl TensorField {
    pub fn new(
        bbox: Aabb,
        dims: [usize; 3],
        rank_density: usize,
        rank_color: usize,
        feature_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if dims.iter().any(|&n| n < 2) {
            return Err(Error::Config("tensor grid needs at least 2 nodes per axis".into()));
        }
        let stride = Layout::new(dims).stride;
        Ok(Self {
            bbox,
            dims,
            rank_density,
            rank_color,
            feature_dim,
            sigma_max: DEFAULT_SIGMA_MAX,
            density_shift: 0.0,
            density: uniform_init(stride * rank_density, 0.0, 1e-2, rng),
            color: uniform_init(stride * rank_color, 0.0, 1e-2, rng),
            basis: {
                let a = 1.0 / ((3 * rank_color).max(1) as f64).sqrt();
                uniform_init(feature_dim * 3 * rank_color, 0.0, a, rng)
            },
        })
    }

    fn stencil(&self, p: &[f64; 3]) -> Stencil {
        let u = self.bbox.unit(p);
        Stencil {
            l: [0, 1, 2].map(|a| Lerp::new(u[a], self.dims[a])),
        }
    }

    /// Component values `v_m(p) * M_m(p)` for every rank/mode, and their
    /// gradients w.r.t. the unit coordinates.
    fn components(&self, block: &[f64], rank: usize, s: &Stencil, grads: bool) -> (Vec<f64>, Vec<[f64; 3]>) {
        let lay = Layout::new(self.dims);
        let mut vals = Vec::with_capacity(3 * rank);
        let mut dvals = Vec::with_capacity(if grads { 3 * rank } else { 0 });
        for r in 0..rank {
            let b = &block[r * lay.stride..(r + 1) * lay.stride];
            for m in 0..3 {
                let [a0, a1] = PLANE_AXES[m];
                let v = s.l[m].eval(&b[lay.vec[m]..], 1);
                let mat = &b[lay.mat[m]..];
                let (mv, du, dv) = bilerp(mat, self.dims[a1], 1, &s.l[a0], &s.l[a1], 0);
                vals.push(v * mv);
                if grads {
                    let mut g = [0.0; 3];
                    g[m] = s.l[m].slope(&b[lay.vec[m]..], 1) * mv;
                    g[a0] = v * du;
                    g[a1] = v * dv;
                    dvals.push(g);
                }
            }
        }
        (vals, dvals)
    }

    fn scatter(&self, grad: &mut [f64], block: &[f64], rank: usize, s: &Stencil, dvals: &[f64]) {
        let lay = Layout::new(self.dims);
        for r in 0..rank {
            let b = &block[r * lay.stride..(r + 1) * lay.stride];
            let gb = &mut grad[r * lay.stride..(r + 1) * lay.stride];
            for m in 0..3 {
                let g = dvals[3 * r + m];
                if g == 0.0 {
                    continue;
                }
                let [a0, a1] = PLANE_AXES[m];
                let v = s.l[m].eval(&b[lay.vec[m]..], 1);
                let (mv, _, _) = bilerp(&b[lay.mat[m]..], self.dims[a1], 1, &s.l[a0], &s.l[a1], 0);
                let [w0, w1] = s.l[m].weights();
                gb[lay.vec[m] + s.l[m].i0] += g * mv * w0;
                gb[lay.vec[m] + s.l[m].i0 + 1] += g * mv * w1;
                bilerp_scatter(&mut gb[lay.mat[m]..], self.dims[a1], 1, &s.l[a0], &s.l[a1], 0, g * v);
            }
        }
    }

    /// Pre-activation density `G(p)` (no box test).
    pub fn density_raw(&self, p: &[f64; 3]) -> f64 {
        let s = self.stencil(p);
        self.components(&self.density, self.rank_density, &s, false).0.iter().sum()
    }

    pub fn query(&self, p: &[f64; 3]) -> Option<(f64, Vec<f64>)> {
        if !self.bbox.contains(p) {
            return None;
        }
        let s = self.stencil(p);
        let g: f64 = self.components(&self.density, self.rank_density, &s, false).0.iter().sum();
        let sigma = self.sigma_max * sigmoid(g + self.density_shift);
        let (comp, _) = self.components(&self.color, self.rank_color, &s, false);
        let n = comp.len();
        let h = (0..self.feature_dim)
            .map(|d| {
                let row = &self.basis[d * n..(d + 1) * n];
                row.iter().zip(&comp).map(|(a, c)| a * c).sum()
            })
            .collect();
        Some((sigma, h))
    }

    /// Adds gradients into `[density, color, basis]`.
    pub fn backward(&self, p: &[f64; 3], d_sigma: f64, d_feature: &[f64], grads: &mut [Vec<f64>], dp: &mut [f64; 3]) {
        if !self.bbox.contains(p) {
            return;
        }
        let s = self.stencil(p);
        let ext = self.bbox.extent();
        let (dcomp_d, ddens) = self.components(&self.density, self.rank_density, &s, true);
        let g: f64 = dcomp_d.iter().sum();
        let sg = sigmoid(g + self.density_shift);
        let dg = d_sigma * self.sigma_max * sg * (1.0 - sg);
        let ones = vec![dg; dcomp_d.len()];
        let (gd, rest) = grads.split_at_mut(1);
        self.scatter(&mut gd[0], &self.density, self.rank_density, &s, &ones);
        for dv in &ddens {
            for a in 0..3 {
                dp[a] += dg * dv[a] / ext[a];
            }
        }

        let (comp, dcomp) = self.components(&self.color, self.rank_color, &s, true);
        let n = comp.len();
        let mut gcomp = vec![0.0; n];
        let gbasis = &mut rest[1];
        for d in 0..self.feature_dim {
            let gh = d_feature[d];
            if gh == 0.0 {
                continue;
            }
            let row = &self.basis[d * n..(d + 1) * n];
            for k in 0..n {
                gcomp[k] += gh * row[k];
                gbasis[d * n + k] += gh * comp[k];
            }
        }
        self.scatter(&mut rest[0], &self.color, self.rank_color, &s, &gcomp);
        for (k, dv) in dcomp.iter().enumerate() {
            for a in 0..3 {
                dp[a] += gcomp[k] * dv[a] / ext[a];
            }
        }
    }

    /// Materializes `G` on every grid vertex (dense reconstruction oracle).
    pub fn dense_density(&self) -> Vec<f64> {
        let [ni, nj, nk] = self.dims;
        let lay = Layout::new(self.dims);
        let mut out = vec![0.0; ni * nj * nk];
        for r in 0..self.rank_density {
            let b = &self.density[r * lay.stride..(r + 1) * lay.stride];
            for i in 0..ni {
                for j in 0..nj {
                    for k in 0..nk {
                        let x = b[lay.vec[0] + i] * b[lay.mat[0] + j * nk + k]
                            + b[lay.vec[1] + j] * b[lay.mat[1] + i * nk + k]
                            + b[lay.vec[2] + k] * b[lay.mat[2] + i * nj + j];
                        out[(i * nj + j) * nk + k] += x;
                    }
                }
            }
        }
        out
    }
}
