//! Multi-plane images built from RGB-D frames: warping, compositing,
//! occlusion reasoning, 3D flow, infilling and temporal view synthesis.
//!
//! Planes are ordered nearest first. Cells are stored plane-major, then
//! row-major: cell `(x, y, z)` lives at `z * w * h + y * w + x`.

pub mod flow;
pub mod infill;
pub mod predict;

use std::path::Path;

use nalgebra::{Vector2, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{pose_warp, s_from_depth, splat_forward, Camera};
use crate::image::{sample_bilinear_into, Image, Mask};
use crate::priors::plane_depths;

pub use flow::{estimate_flow3d, extrapolate_flow, masked_correlation, CostVolume, Flow3D, FlowConfig};
pub use infill::{infill, InfillConfig, InfillResult};
pub use predict::{depth_range, predict_frames, BoundMode, FrameData, GroundTruth, Prediction, TvsConfig, TvsOutput};

/// Default plane count.
pub const DEFAULT_PLANES: usize = 4;

/// Alpha at or above which a cell counts as occupied by the flow search.
pub const OCCUPIED: f64 = 0.5;

/// Targets this close to an integer pixel are snapped onto it.
const SNAP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Mpi {
    pub width: usize,
    pub height: usize,
    /// Plane depths, nearest first, uniform in inverse depth.
    pub depths: Vec<f64>,
    /// Three entries per cell.
    pub color: Vec<f64>,
    /// True depth carried by each cell.
    pub depth: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl Mpi {
    pub fn empty(width: usize, height: usize, depths: Vec<f64>) -> Self {
        let n = width * height * depths.len();
        Self { width, height, depths, color: vec![0.0; 3 * n], depth: vec![0.0; n], alpha: vec![0.0; n] }
    }

    pub fn planes(&self) -> usize {
        self.depths.len()
    }

    pub fn cells(&self) -> usize {
        self.alpha.len()
    }

    #[inline]
    pub fn cell(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.height + y) * self.width + x
    }

    /// `(x, y, z)` of a cell index.
    #[inline]
    pub fn coords(&self, i: usize) -> (usize, usize, usize) {
        let wh = self.width * self.height;
        (i % self.width, (i % wh) / self.width, i / wh)
    }

    /// Plane nearest to depth `d` in inverse depth, clamped to the stack.
    pub fn nearest_plane(&self, d: f64) -> usize {
        nearest_plane(&self.depths, d)
    }

    pub fn plane_color(&self, z: usize) -> Image {
        let n = self.width * self.height;
        Image { width: self.width, height: self.height, channels: 3, data: self.color[3 * z * n..3 * (z + 1) * n].to_vec() }
    }

    pub fn plane_alpha(&self, z: usize) -> Image {
        let n = self.width * self.height;
        Image { width: self.width, height: self.height, channels: 1, data: self.alpha[z * n..(z + 1) * n].to_vec() }
    }

    pub fn plane_depth(&self, z: usize) -> Image {
        let n = self.width * self.height;
        Image { width: self.width, height: self.height, channels: 1, data: self.depth[z * n..(z + 1) * n].to_vec() }
    }

    /// `1 - prod(1 - alpha)` per pixel.
    pub fn opacity(&self) -> Image {
        let mut out = Image::new(self.width, self.height, 1);
        for y in 0..self.height {
            for x in 0..self.width {
                let t: f64 = (0..self.planes()).map(|z| 1.0 - self.alpha[self.cell(x, y, z)]).product();
                out.set(x, y, 0, 1.0 - t);
            }
        }
        out
    }

    /// Per-plane `rgb`, `alpha` PNGs and `depth` PFMs under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        use crate::scenes::io::{write_pfm, write_png};
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for z in 0..self.planes() {
            write_png(&dir.join(format!("plane{z}_rgb.png")), &self.plane_color(z))?;
            write_png(&dir.join(format!("plane{z}_alpha.png")), &self.plane_alpha(z))?;
            write_pfm(&dir.join(format!("plane{z}_depth.pfm")), &self.plane_depth(z))?;
        }
        Ok(())
    }
}

pub fn nearest_plane(depths: &[f64], d: f64) -> usize {
    let n = depths.len();
    if n == 1 {
        return 0;
    }
    let s = s_from_depth(d, depths[0], depths[n - 1]);
    (s * (n - 1) as f64).round().clamp(0.0, (n - 1) as f64) as usize
}

/// One-hot MPI of an RGB-D frame with `planes` planes in `[z_min, z_max]`.
pub fn build_mpi(rgb: &Image, depth: &Image, planes: usize, z_min: f64, z_max: f64) -> Result<Mpi> {
    if rgb.channels != 3 || depth.channels != 1 || rgb.width != depth.width || rgb.height != depth.height {
        return Err(Error::Shape("build_mpi needs a 3-channel color and a 1-channel depth of equal size".into()));
    }
    if planes == 0 || !(z_min > 0.0 && z_max > z_min) {
        return Err(Error::Config("MPI needs at least one plane and 0 < z_min < z_max".into()));
    }
    let mut m = Mpi::empty(rgb.width, rgb.height, plane_depths(planes, z_min, z_max));
    let tol = 1e-9 * z_max;
    for y in 0..rgb.height {
        for x in 0..rgb.width {
            let d = depth.get(x, y, 0);
            if !(d >= z_min - tol && d <= z_max + tol) {
                return Err(Error::DepthOutOfRange { depth: d, z_min, z_max });
            }
            let i = m.cell(x, y, m.nearest_plane(d));
            m.alpha[i] = 1.0;
            m.depth[i] = d;
            m.color[3 * i..3 * i + 3].copy_from_slice(rgb.pixel(x, y));
        }
    }
    Ok(m)
}

/// Back-to-front over compositing onto `background`; depth uses the same
/// weights over a zero background.
pub fn composite_over(m: &Mpi, background: [f64; 3]) -> (Image, Image) {
    let mut rgb = Image::new(m.width, m.height, 3);
    let mut dep = Image::new(m.width, m.height, 1);
    for y in 0..m.height {
        for x in 0..m.width {
            let mut c = background;
            let mut d = 0.0;
            for z in (0..m.planes()).rev() {
                let i = m.cell(x, y, z);
                let a = m.alpha[i];
                if a == 0.0 {
                    continue;
                }
                for k in 0..3 {
                    c[k] = a * m.color[3 * i + k] + (1.0 - a) * c[k];
                }
                d = a * m.depth[i] + (1.0 - a) * d;
            }
            rgb.pixel_mut(x, y).copy_from_slice(&c);
            dep.set(x, y, 0, d);
        }
    }
    (rgb, dep)
}

pub fn composite(m: &Mpi) -> (Image, Image) {
    composite_over(m, [0.0; 3])
}

/// `v(x, z) = prod_{y < z} (1 - alpha(x, y))` per cell.
pub fn visibility_mask(m: &Mpi) -> Vec<f64> {
    let mut v = vec![0.0; m.cells()];
    for y in 0..m.height {
        for x in 0..m.width {
            let mut t = 1.0;
            for z in 0..m.planes() {
                let i = m.cell(x, y, z);
                v[i] = t;
                t *= 1.0 - m.alpha[i];
            }
        }
    }
    v
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < SNAP {
        r
    } else {
        v
    }
}

/// Where an occupied cell lands: target pixel, transported depth and plane.
fn transport(m: &Mpi, i: usize, u: Vector3<f64>, src: &Camera, dst: &Camera) -> Option<(Vector2<f64>, f64, usize)> {
    let (x, y, _) = m.coords(i);
    let (p, d) = pose_warp(&Vector2::new(x as f64, y as f64), &u, m.depth[i], src, dst).ok()?;
    Some((Vector2::new(snap(p.x), snap(p.y)), d, m.nearest_plane(d)))
}

/// Forward-warps every occupied cell from `src` to `dst`, moving it by its
/// 3D flow first. Returns the warped MPI and the pixels that received no
/// alpha on any plane.
pub fn warp_mpi(m: &Mpi, flow: Option<&Flow3D>, src: &Camera, dst: &Camera) -> (Mpi, Mask) {
    let z_n = m.planes();
    let mut values: Vec<Vec<f64>> = vec![Vec::new(); z_n];
    let mut targets: Vec<Vec<Vector2<f64>>> = vec![Vec::new(); z_n];
    let mut weights: Vec<Vec<f64>> = vec![Vec::new(); z_n];
    for i in 0..m.cells() {
        let a = m.alpha[i];
        if a <= 0.0 {
            continue;
        }
        let u = flow.map_or(Vector3::zeros(), |f| Vector3::from(f.u[i]));
        let Some((p, d, z)) = transport(m, i, u, src, dst) else {
            continue;
        };
        values[z].extend_from_slice(&[m.color[3 * i], m.color[3 * i + 1], m.color[3 * i + 2], d]);
        targets[z].push(p);
        weights[z].push(a);
    }
    let (w, h) = (dst.width, dst.height);
    let mut out = Mpi::empty(w, h, m.depths.clone());
    let mut hit = vec![false; w * h];
    for z in 0..z_n {
        let s = splat_forward(&values[z], 4, &targets[z], &weights[z], w, h);
        for p in 0..w * h {
            if !s.coverage[p] {
                continue;
            }
            let i = z * w * h + p;
            out.alpha[i] = s.weight[p].min(1.0);
            out.color[3 * i..3 * i + 3].copy_from_slice(&s.image.data[4 * p..4 * p + 3]);
            out.depth[i] = s.image.data[4 * p + 3];
            hit[p] = true;
        }
    }
    let mut dis = Mask::new(w, h, false);
    for (p, &hp) in hit.iter().enumerate() {
        dis.data[p] = !hp;
    }
    (out, dis)
}

/// Cells of `m` that stay visible after moving by `flow` (seen from
/// `camera`): forward-warp, take the visibility of the result, read it back
/// at each cell's destination and threshold at one half. Empty cells are
/// marked visible.
pub fn occlusion_mask(m: &Mpi, flow: &Flow3D, camera: &Camera) -> Vec<bool> {
    let (warped, _) = warp_mpi(m, Some(flow), camera, camera);
    let v = visibility_mask(&warped);
    let n = m.width * m.height;
    let planes: Vec<Image> = (0..m.planes())
        .map(|z| Image { width: m.width, height: m.height, channels: 1, data: v[z * n..(z + 1) * n].to_vec() })
        .collect();
    let mut out = vec![true; m.cells()];
    let mut s = [0.0];
    for (i, o) in out.iter_mut().enumerate() {
        if m.alpha[i] <= 0.0 {
            continue;
        }
        let Some((p, _, z)) = transport(m, i, Vector3::from(flow.u[i]), camera, camera) else {
            continue;
        };
        if sample_bilinear_into(&planes[z], p.x, p.y, &mut s) {
            *o = s[0] > 0.5;
        }
    }
    out
}
