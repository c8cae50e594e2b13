//! 3D scene flow between two MPIs by masked-correlation search.
//!
//! Features are mean-subtracted color patches per plane, scaled to norm
//! `sqrt(C)`, so a perfect match scores `C` and the correlation behaves like
//! a local ZNCC.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{nearest_plane, Mpi, OCCUPIED};
use crate::image::Image;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub levels: usize,
    /// Search radius in pixels at every level.
    pub radius: usize,
    /// Plane-offset window half size.
    pub s_z: usize,
    /// Softmax temperature as a fraction of the feature dimension.
    pub temperature: f64,
    pub smooth_iters: usize,
    /// Edge sensitivity of the smoothing weights.
    pub smooth_a: f64,
    /// Side of the square feature patch.
    pub patch: usize,
    /// Restrict matching to the same plane (no depth motion).
    pub two_d_only: bool,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            levels: 2,
            radius: 8,
            s_z: 1,
            temperature: 0.1,
            smooth_iters: 20,
            smooth_a: 10.0,
            patch: 3,
            two_d_only: false,
        }
    }
}

/// Per-cell 3D flow of an MPI.
#[derive(Debug, Clone, PartialEq)]
pub struct Flow3D {
    pub width: usize,
    pub height: usize,
    pub depths: Vec<f64>,
    pub s_z: usize,
    /// In-plane displacement in pixels.
    pub a: Vec<[f64; 2]>,
    /// `2 s_z + 1` offset probabilities per cell, offset `-s_z` first.
    pub b: Vec<f64>,
    /// Realized `(dx, dy, dz)` with `dz` in meters.
    pub u: Vec<[f64; 3]>,
}

impl Flow3D {
    pub fn zeros(width: usize, height: usize, depths: Vec<f64>, s_z: usize) -> Self {
        let n = width * height * depths.len();
        let k = 2 * s_z + 1;
        let mut b = vec![0.0; n * k];
        for i in 0..n {
            b[i * k + s_z] = 1.0;
        }
        Self { width, height, depths, s_z, a: vec![[0.0; 2]; n], b, u: vec![[0.0; 3]; n] }
    }

    pub fn offsets(&self) -> usize {
        2 * self.s_z + 1
    }

    pub fn b_at(&self, i: usize) -> &[f64] {
        let k = self.offsets();
        &self.b[i * k..(i + 1) * k]
    }

    /// Depth shift implied by `b` at cell `i` of plane `z`.
    pub fn expected_shift(&self, i: usize, z: usize) -> f64 {
        let zn = self.depths.len() as i64;
        self.b_at(i)
            .iter()
            .enumerate()
            .map(|(k, &p)| {
                let t = (z as i64 + k as i64 - self.s_z as i64).clamp(0, zn - 1) as usize;
                p * self.depths[t]
            })
            .sum::<f64>()
            - self.depths[z]
    }

    /// Flow from a dense per-pixel `(dx, dy, dz)` image, applied to every
    /// occupied cell; `b` is one-hot at the offset nearest to the shifted
    /// cell depth.
    pub fn from_dense(m: &Mpi, flow: &Image, s_z: usize) -> Self {
        let mut f = Self::zeros(m.width, m.height, m.depths.clone(), s_z);
        for i in 0..m.cells() {
            if m.alpha[i] <= 0.0 {
                continue;
            }
            let (x, y, z) = m.coords(i);
            let v = flow.pixel(x, y);
            f.a[i] = [v[0], v[1]];
            f.u[i] = [v[0], v[1], v[2]];
            f.set_one_hot(i, z, m.depth[i] + v[2]);
        }
        f
    }

    fn set_one_hot(&mut self, i: usize, z: usize, target_depth: f64) {
        let k = self.offsets();
        let t = nearest_plane(&self.depths, target_depth) as i64;
        let off = (t - z as i64).clamp(-(self.s_z as i64), self.s_z as i64);
        let b = &mut self.b[i * k..(i + 1) * k];
        b.iter_mut().for_each(|v| *v = 0.0);
        b[(off + self.s_z as i64) as usize] = 1.0;
    }

    /// Per-pixel flow of the front-most occupied cell.
    pub fn to_image(&self, m: &Mpi) -> Image {
        let mut out = Image::new(self.width, self.height, 3);
        for y in 0..self.height {
            for x in 0..self.width {
                if let Some(z) = (0..m.planes()).find(|&z| m.alpha[m.cell(x, y, z)] >= OCCUPIED) {
                    out.pixel_mut(x, y).copy_from_slice(&self.u[m.cell(x, y, z)]);
                }
            }
        }
        out
    }
}

/// Linear motion model: the flow `k'` steps ahead from the flow `k` steps
/// back, `-(k'/k) u`. `b` becomes one-hot at the offset nearest to the
/// scaled depth shift.
pub fn extrapolate_flow(f: &Flow3D, k: usize, k_prime: usize) -> Flow3D {
    let s = -(k_prime as f64) / k as f64;
    let mut out = Flow3D::zeros(f.width, f.height, f.depths.clone(), f.s_z);
    let wh = f.width * f.height;
    for i in 0..f.u.len() {
        let z = i / wh;
        let u = f.u[i];
        out.a[i] = [s * f.a[i][0], s * f.a[i][1]];
        out.u[i] = [s * u[0], s * u[1], s * u[2]];
        out.set_one_hot(i, z, f.depths[z] + out.u[i][2]);
    }
    out
}

/// Per-cell features with their occupancy masks.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    pub width: usize,
    pub height: usize,
    pub planes: usize,
    pub dim: usize,
    pub h: Vec<f64>,
    /// Occupancy in {0, 1}.
    pub mask: Vec<f64>,
    /// Cells whose patch has no contrast.
    pub flat: Vec<bool>,
}

impl FeatureStack {
    #[inline]
    fn feature(&self, i: usize) -> &[f64] {
        &self.h[i * self.dim..(i + 1) * self.dim]
    }
}

/// `patch x patch` mean-subtracted color patches of occupied cells.
pub fn features(m: &Mpi, patch: usize) -> FeatureStack {
    let r = (patch / 2) as i64;
    let side = 2 * r as usize + 1;
    let dim = 3 * side * side;
    let (w, h) = (m.width as i64, m.height as i64);
    let cells = m.cells();
    let mut out = FeatureStack {
        width: m.width,
        height: m.height,
        planes: m.planes(),
        dim,
        h: vec![0.0; cells * dim],
        mask: vec![0.0; cells],
        flat: vec![true; cells],
    };
    let rows: Vec<(Vec<f64>, bool)> = (0..cells)
        .into_par_iter()
        .map(|i| {
            let mut f = vec![0.0; dim];
            if m.alpha[i] < OCCUPIED {
                return (f, true);
            }
            let (x, y, z) = m.coords(i);
            let mut mean = [0.0; 3];
            let mut n = 0.0;
            let mut used = vec![false; side * side];
            for dy in -r..=r {
                for dx in -r..=r {
                    let (xx, yy) = (x as i64 + dx, y as i64 + dy);
                    if xx < 0 || yy < 0 || xx >= w || yy >= h {
                        continue;
                    }
                    let j = m.cell(xx as usize, yy as usize, z);
                    if m.alpha[j] < OCCUPIED {
                        continue;
                    }
                    let k = ((dy + r) * side as i64 + dx + r) as usize;
                    used[k] = true;
                    for c in 0..3 {
                        f[3 * k + c] = m.color[3 * j + c];
                        mean[c] += m.color[3 * j + c];
                    }
                    n += 1.0;
                }
            }
            for (k, &u) in used.iter().enumerate() {
                if u {
                    for c in 0..3 {
                        f[3 * k + c] -= mean[c] / n;
                    }
                }
            }
            let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-6 {
                f.iter_mut().for_each(|v| *v = 0.0);
                return (f, true);
            }
            let s = (dim as f64).sqrt() / norm;
            f.iter_mut().for_each(|v| *v *= s);
            (f, false)
        })
        .collect();
    for (i, (f, flat)) in rows.into_iter().enumerate() {
        out.h[i * dim..(i + 1) * dim].copy_from_slice(&f);
        out.mask[i] = if m.alpha[i] >= OCCUPIED { 1.0 } else { 0.0 };
        out.flat[i] = flat;
    }
    out
}

/// Dense masked cost volume over a window of `(2r+1)^2 (2 s_z+1)` offsets
/// per cell; offsets ordered `dz` outermost, then `dy`, then `dx`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostVolume {
    pub radius: usize,
    pub s_z: usize,
    pub cv: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl CostVolume {
    pub fn window(&self) -> usize {
        let s = 2 * self.radius + 1;
        s * s * (2 * self.s_z + 1)
    }

    pub fn index(&self, cell: usize, dx: i64, dy: i64, dz: i64) -> usize {
        let s = 2 * self.radius as i64 + 1;
        let r = self.radius as i64;
        let k = ((dz + self.s_z as i64) * s + dy + r) * s + dx + r;
        cell * self.window() + k as usize
    }
}

/// `(h1 a1) . (h2 a2)` at a single pair of cells; `None` outside the stack.
#[inline]
fn correlate(a: &FeatureStack, i: usize, b: &FeatureStack, x2: i64, y2: i64, z2: i64) -> Option<(f64, f64)> {
    if x2 < 0 || y2 < 0 || z2 < 0 || x2 >= b.width as i64 || y2 >= b.height as i64 || z2 >= b.planes as i64 {
        return None;
    }
    let j = ((z2 as usize * b.height) + y2 as usize) * b.width + x2 as usize;
    let m = a.mask[i] * b.mask[j];
    if m == 0.0 {
        return Some((0.0, 0.0));
    }
    let dot: f64 = a.feature(i).iter().zip(b.feature(j)).map(|(p, q)| p * q).sum();
    Some((dot * m, m))
}

pub fn masked_correlation(a: &FeatureStack, b: &FeatureStack, radius: usize, s_z: usize) -> CostVolume {
    let mut out = CostVolume { radius, s_z, cv: Vec::new(), alpha: Vec::new() };
    let win = out.window();
    let cells = a.mask.len();
    out.cv = vec![0.0; cells * win];
    out.alpha = vec![0.0; cells * win];
    let (r, s) = (radius as i64, s_z as i64);
    for i in 0..cells {
        let x = (i % a.width) as i64;
        let y = ((i / a.width) % a.height) as i64;
        let z = (i / (a.width * a.height)) as i64;
        for dz in -s..=s {
            for dy in -r..=r {
                for dx in -r..=r {
                    if let Some((c, m)) = correlate(a, i, b, x + dx, y + dy, z + dz) {
                        let k = out.index(i, dx, dy, dz);
                        out.cv[k] = c;
                        out.alpha[k] = m;
                    }
                }
            }
        }
    }
    out
}

/// Half-resolution MPI: alpha averaged over 2x2 blocks, color and depth
/// alpha-weighted. Depth planes are kept.
fn downsample(m: &Mpi) -> Mpi {
    let (w, h) = ((m.width / 2).max(1), (m.height / 2).max(1));
    let mut out = Mpi::empty(w, h, m.depths.clone());
    for z in 0..m.planes() {
        for y in 0..h {
            for x in 0..w {
                let (mut sa, mut n) = (0.0, 0.0);
                let mut c = [0.0; 3];
                let mut d = 0.0;
                for yy in 2 * y..(2 * y + 2).min(m.height) {
                    for xx in 2 * x..(2 * x + 2).min(m.width) {
                        let i = m.cell(xx, yy, z);
                        let a = m.alpha[i];
                        sa += a;
                        n += 1.0;
                        for k in 0..3 {
                            c[k] += a * m.color[3 * i + k];
                        }
                        d += a * m.depth[i];
                    }
                }
                let o = out.cell(x, y, z);
                out.alpha[o] = sa / n;
                if sa > 0.0 {
                    for k in 0..3 {
                        out.color[3 * o + k] = c[k] / sa;
                    }
                    out.depth[o] = d / sa;
                }
            }
        }
    }
    out
}

/// Vertex of the parabola through `(-1, l), (0, c), (1, r)`, if it is a
/// maximum.
fn parabolic(l: f64, c: f64, r: f64) -> f64 {
    let den = l - 2.0 * c + r;
    if !(l.is_finite() && r.is_finite()) || den >= 0.0 {
        return 0.0;
    }
    (0.5 * (l - r) / den).clamp(-0.5, 0.5)
}

struct LevelResult {
    u: Vec<[f64; 3]>,
    b: Vec<f64>,
    reliable: Vec<bool>,
}

fn search_level(m1: &Mpi, m2: &Mpi, init: &[[f64; 2]], cfg: &FlowConfig, s_z: usize) -> LevelResult {
    let fa = features(m1, cfg.patch);
    let fb = features(m2, cfg.patch);
    let tau = cfg.temperature * fa.dim as f64;
    let r = cfg.radius as i64;
    let side = 2 * cfg.radius + 1;
    let k = 2 * s_z + 1;
    let rows: Vec<([f64; 3], Vec<f64>, bool)> = (0..m1.cells())
        .into_par_iter()
        .map(|i| {
            let mut b = vec![0.0; k];
            b[s_z] = 1.0;
            let (x, y, z) = m1.coords(i);
            let (x, y, zi) = (x as i64, y as i64, z as i64);
            let a0 = init[i];
            if fa.mask[i] == 0.0 || fa.flat[i] {
                return ([a0[0], a0[1], 0.0], b, false);
            }
            let (cx, cy) = (a0[0].round() as i64, a0[1].round() as i64);
            let mut score = vec![f64::NEG_INFINITY; side * side];
            let mut best: Option<(usize, f64)> = None;
            for dy in -r..=r {
                for dx in -r..=r {
                    let mut s = 0.0;
                    let mut any = false;
                    for dz in -(s_z as i64)..=s_z as i64 {
                        if let Some((c, m)) = correlate(&fa, i, &fb, x + cx + dx, y + cy + dy, zi + dz) {
                            if m > 0.0 {
                                s += c;
                                any = true;
                            }
                        }
                    }
                    if !any {
                        continue;
                    }
                    let q = ((dy + r) as usize) * side + (dx + r) as usize;
                    score[q] = s;
                    if best.is_none_or(|(_, bs)| s > bs) {
                        best = Some((q, s));
                    }
                }
            }
            let Some((q, _)) = best else {
                return ([a0[0], a0[1], 0.0], b, false);
            };
            let (qx, qy) = (q % side, q / side);
            let (tx, ty) = (x + cx + qx as i64 - r, y + cy + qy as i64 - r);
            // an exact match at an integer offset needs no refinement
            let exact = (-(s_z as i64)..=s_z as i64).any(|dz| {
                correlate(&fa, i, &fb, tx, ty, zi + dz).is_some_and(|(c, m)| m > 0.0 && c >= fa.dim as f64 - 1e-9)
            });
            let at = |xx: usize, yy: usize| score[yy * side + xx];
            let (mut sx, mut sy) = (0.0, 0.0);
            if !exact {
                if qx > 0 && qx + 1 < side {
                    sx = parabolic(at(qx - 1, qy), at(qx, qy), at(qx + 1, qy));
                }
                if qy > 0 && qy + 1 < side {
                    sy = parabolic(at(qx, qy - 1), at(qx, qy), at(qx, qy + 1));
                }
            }
            let ax = (tx - x) as f64 + sx;
            let ay = (ty - y) as f64 + sy;
            // offset distribution at the chosen location
            let mut logits = vec![f64::NEG_INFINITY; k];
            for (o, l) in logits.iter_mut().enumerate() {
                let dz = o as i64 - s_z as i64;
                if let Some((c, m)) = correlate(&fa, i, &fb, tx, ty, zi + dz) {
                    if m > 0.0 {
                        *l = c / tau;
                    }
                }
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if mx.is_finite() {
                let e: Vec<f64> = logits.iter().map(|l| if l.is_finite() { (l - mx).exp() } else { 0.0 }).collect();
                let s: f64 = e.iter().sum();
                b = e.iter().map(|v| v / s).collect();
            }
            let zn = m1.planes() as i64;
            let dz: f64 = b
                .iter()
                .enumerate()
                .map(|(o, p)| p * m1.depths[(zi + o as i64 - s_z as i64).clamp(0, zn - 1) as usize])
                .sum::<f64>()
                - m1.depths[z];
            ([ax, ay, dz], b, true)
        })
        .collect();
    let mut out = LevelResult { u: Vec::with_capacity(rows.len()), b: Vec::with_capacity(rows.len() * k), reliable: Vec::new() };
    for (u, b, rel) in rows {
        out.u.push(u);
        out.b.extend(b);
        out.reliable.push(rel);
    }
    smooth(m1, &mut out.u, &out.reliable, cfg);
    out
}

/// Jacobi passes of edge-aware averaging over same-plane 4-neighbors;
/// unreliable cells take their neighbors' mean only.
fn smooth(m: &Mpi, u: &mut [[f64; 3]], reliable: &[bool], cfg: &FlowConfig) {
    let (w, h) = (m.width, m.height);
    let occupied = |i: usize| m.alpha[i] >= OCCUPIED;
    let weight = |i: usize, j: usize| {
        let da = (m.alpha[i] - m.alpha[j]).abs();
        let dc = (0..3).map(|c| (m.color[3 * i + c] - m.color[3 * j + c]).abs()).sum::<f64>() / 3.0;
        (1.0 - da) * (-cfg.smooth_a * dc).exp()
    };
    for _ in 0..cfg.smooth_iters {
        let prev = u.to_vec();
        for i in 0..m.cells() {
            if !occupied(i) {
                continue;
            }
            let (x, y, z) = m.coords(i);
            let mut acc = [0.0; 3];
            let mut ws = 0.0;
            if reliable[i] {
                acc = prev[i];
                ws = 1.0;
            }
            let nbrs = [
                (x > 0).then(|| m.cell(x - 1, y, z)),
                (x + 1 < w).then(|| m.cell(x + 1, y, z)),
                (y > 0).then(|| m.cell(x, y - 1, z)),
                (y + 1 < h).then(|| m.cell(x, y + 1, z)),
            ];
            for j in nbrs.into_iter().flatten() {
                if !occupied(j) {
                    continue;
                }
                let wt = weight(i, j);
                for c in 0..3 {
                    acc[c] += wt * prev[j][c];
                }
                ws += wt;
            }
            if ws > 0.0 {
                u[i] = acc.map(|v| v / ws);
            }
        }
    }
}

/// Flow from each cell of `m_n` to its match in `m_prev`, coarse to fine.
/// Both MPIs must share the camera view and planes.
pub fn estimate_flow3d(m_n: &Mpi, m_prev: &Mpi, cfg: &FlowConfig) -> Flow3D {
    let s_z = if cfg.two_d_only { 0 } else { cfg.s_z };
    let levels = cfg.levels.max(1);
    let mut pyr = vec![(m_n.clone(), m_prev.clone())];
    for l in 1..levels {
        let (a, b) = &pyr[l - 1];
        pyr.push((downsample(a), downsample(b)));
    }
    let mut prev: Option<(Mpi, Vec<[f64; 3]>)> = None;
    let mut last = None;
    for l in (0..levels).rev() {
        let (m1, m2) = &pyr[l];
        let init: Vec<[f64; 2]> = match &prev {
            None => vec![[0.0; 2]; m1.cells()],
            Some((pm, pu)) => upsample(pm, pu, m1),
        };
        let res = search_level(m1, m2, &init, cfg, s_z);
        prev = Some((m1.clone(), res.u.clone()));
        last = Some(res);
    }
    let res = last.expect("at least one level");
    let mut f = Flow3D::zeros(m_n.width, m_n.height, m_n.depths.clone(), s_z);
    for i in 0..m_n.cells() {
        if m_n.alpha[i] < OCCUPIED {
            continue;
        }
        f.u[i] = res.u[i];
        f.a[i] = [res.u[i][0], res.u[i][1]];
        let k = f.offsets();
        f.b[i * k..(i + 1) * k].copy_from_slice(&res.b[i * k..(i + 1) * k]);
    }
    f
}

/// Doubles a coarse flow onto the finer grid; cells whose parent is empty
/// take the mean of occupied parents in the 3x3 neighborhood.
fn upsample(coarse: &Mpi, u: &[[f64; 3]], fine: &Mpi) -> Vec<[f64; 2]> {
    (0..fine.cells())
        .map(|i| {
            let (x, y, z) = fine.coords(i);
            let (px, py) = ((x / 2).min(coarse.width - 1), (y / 2).min(coarse.height - 1));
            let j = coarse.cell(px, py, z);
            if coarse.alpha[j] >= OCCUPIED {
                return [2.0 * u[j][0], 2.0 * u[j][1]];
            }
            let mut acc = [0.0; 2];
            let mut n = 0.0;
            for yy in py.saturating_sub(1)..(py + 2).min(coarse.height) {
                for xx in px.saturating_sub(1)..(px + 2).min(coarse.width) {
                    let j = coarse.cell(xx, yy, z);
                    if coarse.alpha[j] >= OCCUPIED {
                        acc[0] += u[j][0];
                        acc[1] += u[j][1];
                        n += 1.0;
                    }
                }
            }
            if n > 0.0 {
                [2.0 * acc[0] / n, 2.0 * acc[1] / n]
            } else {
                [0.0; 2]
            }
        })
        .collect()
}
