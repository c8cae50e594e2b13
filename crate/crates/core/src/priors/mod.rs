//! Non-learned supervision: plane-sweep visibility priors, patch
//! reprojection reliability masks and sparse oracles.

pub mod sparse;

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;

use crate::geometry::{pose_warp, Camera};
use crate::image::{sample_bilinear_into, Image, Mask};

pub use sparse::{SparseDepthPoint, SparseFlowMatch};

pub const DEFAULT_PLANES: usize = 64;
pub const DEFAULT_GAMMA: f64 = 10.0;
pub const DEFAULT_PATCH: usize = 5;
pub const DEFAULT_E_TAU: f64 = 0.1;

/// Pulls locations within round-off of the image border back inside.
#[inline]
fn snap(img: &Image, q: Vector2<f64>) -> Vector2<f64> {
    const TOL: f64 = 1e-7;
    let (mx, my) = ((img.width - 1) as f64, (img.height - 1) as f64);
    let s = |v: f64, m: f64| if v < 0.0 && v > -TOL { 0.0 } else if v > m && v < m + TOL { m } else { v };
    Vector2::new(s(q.x, mx), s(q.y, my))
}

/// A calibrated image.
#[derive(Clone, Copy)]
pub struct View<'a> {
    pub camera: &'a Camera,
    pub image: &'a Image,
}

#[derive(Debug, Clone)]
pub struct PlaneSweepVolume {
    /// Plane depths, nearest first, equispaced in inverse depth.
    pub depths: Vec<f64>,
    /// Secondary image warped into the primary view at each plane.
    pub warped: Vec<Image>,
    /// Per-pixel L1 color error in 8-bit units; `+inf` where the warp leaves
    /// the secondary image.
    pub errors: Vec<Image>,
}

/// Depths of `n` planes equispaced in inverse depth, nearest first.
pub fn plane_depths(n: usize, z_min: f64, z_max: f64) -> Vec<f64> {
    if n == 1 {
        return vec![z_min];
    }
    let (a, b) = (1.0 / z_min, 1.0 / z_max);
    (0..n).map(|k| 1.0 / (a + (b - a) * k as f64 / (n - 1) as f64)).collect()
}

impl PlaneSweepVolume {
    pub fn planes(&self) -> usize {
        self.depths.len()
    }

    /// Index of the plane nearest to depth `z` in inverse depth.
    pub fn plane_index(&self, z: f64) -> usize {
        let n = self.depths.len();
        if n == 1 {
            return 0;
        }
        let a = 1.0 / self.depths[0];
        let b = 1.0 / self.depths[n - 1];
        let k = ((a - 1.0 / z) / (a - b) * (n - 1) as f64).round();
        k.clamp(0.0, (n - 1) as f64) as usize
    }

    /// Minimum error and its plane index per pixel.
    pub fn min_error(&self) -> (Image, Vec<usize>) {
        let (w, h) = (self.errors[0].width, self.errors[0].height);
        let mut e = Image::filled(w, h, 1, f64::INFINITY);
        let mut arg = vec![0; w * h];
        for (k, ek) in self.errors.iter().enumerate() {
            for (i, &v) in ek.data.iter().enumerate() {
                if v < e.data[i] {
                    e.data[i] = v;
                    arg[i] = k;
                }
            }
        }
        (e, arg)
    }
}

/// Warps `secondary` into `primary` at each fronto-parallel plane and scores
/// the per-pixel L1 color difference.
pub fn build_psv(primary: View, secondary: View, planes: usize, z_min: f64, z_max: f64) -> PlaneSweepVolume {
    let depths = plane_depths(planes, z_min, z_max);
    let (w, h) = (primary.camera.width, primary.camera.height);
    let ch = primary.image.channels;
    let layers: Vec<(Image, Image)> = depths
        .par_iter()
        .map(|&z| {
            let mut warped = Image::new(w, h, ch);
            let mut err = Image::filled(w, h, 1, f64::INFINITY);
            let mut buf = vec![0.0; ch];
            for y in 0..h {
                for x in 0..w {
                    let px = Vector2::new(x as f64, y as f64);
                    let Ok((q, _)) = pose_warp(&px, &Vector3::zeros(), z, primary.camera, secondary.camera) else {
                        continue;
                    };
                    let q = snap(secondary.image, q);
                    if !sample_bilinear_into(secondary.image, q.x, q.y, &mut buf) {
                        continue;
                    }
                    let p = primary.image.pixel(x, y);
                    let e: f64 = p.iter().zip(&buf).map(|(a, b)| (a - b).abs()).sum();
                    warped.pixel_mut(x, y).copy_from_slice(&buf);
                    err.set(x, y, 0, 255.0 * e);
                }
            }
            (warped, err)
        })
        .collect();
    let (warped, errors) = layers.into_iter().unzip();
    PlaneSweepVolume { depths, warped, errors }
}

#[derive(Debug, Clone)]
pub struct VisibilityPrior {
    pub visible: Mask,
    pub min_error: Image,
    pub argmin: Vec<usize>,
}

/// `tau' = 1` where `exp(-e / gamma) > 0.5` for the minimum plane error `e`.
pub fn visibility_prior(psv: &PlaneSweepVolume, gamma: f64) -> VisibilityPrior {
    let (e, argmin) = psv.min_error();
    let mut visible = Mask::new(e.width, e.height, false);
    for (i, &v) in e.data.iter().enumerate() {
        visible.data[i] = prior_visible(v, gamma);
    }
    VisibilityPrior { visible, min_error: e, argmin }
}

#[inline]
pub fn prior_visible(e: f64, gamma: f64) -> bool {
    (-e / gamma).exp() > 0.5
}

/// Index of the camera closest to `cameras[view]` by center distance, ties
/// going to the lower index. `None` when there is no other camera.
pub fn nearest_view(cameras: &[&Camera], view: usize) -> Option<usize> {
    let c = cameras[view].center();
    let mut best: Option<(usize, f64)> = None;
    for (i, cam) in cameras.iter().enumerate() {
        if i == view {
            continue;
        }
        let d = (cam.center() - c).norm();
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    best.map(|(i, _)| i)
}

/// Mean squared intensity error between a `k x k` patch around `q` in `view`
/// and its reprojection into `other` through depth `z`. Patch pixels leaving
/// either image are skipped; `None` when none remain.
pub fn patch_error(view: View, other: View, q: &Vector2<f64>, z: f64, k: usize) -> Option<f64> {
    let r = (k / 2) as i64;
    let ch = view.image.channels;
    let mut a = vec![0.0; ch];
    let mut b = vec![0.0; ch];
    let mut acc = 0.0;
    let mut n = 0usize;
    for dy in -r..=r {
        for dx in -r..=r {
            let p = Vector2::new(q.x + dx as f64, q.y + dy as f64);
            if !sample_bilinear_into(view.image, p.x, p.y, &mut a) {
                continue;
            }
            let Ok((p2, _)) = pose_warp(&p, &Vector3::zeros(), z, view.camera, other.camera) else {
                continue;
            };
            let p2 = snap(other.image, p2);
            if !sample_bilinear_into(other.image, p2.x, p2.y, &mut b) {
                continue;
            }
            acc += a.iter().zip(&b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>();
            n += ch;
        }
    }
    (n > 0).then(|| acc / n as f64)
}

/// Reliability decision for one pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reliability {
    pub m_a: bool,
    pub m_m: bool,
    pub e_a: f64,
    pub e_m: f64,
}

/// Mask rule: a depth is trusted when its error is no larger than the other
/// model's and within `e_tau`.
pub fn reliability_from_errors(e_m: f64, e_a: f64, e_tau: f64) -> Reliability {
    Reliability { m_a: e_a <= e_m && e_a <= e_tau, m_m: e_m <= e_a && e_m <= e_tau, e_a, e_m }
}

pub fn reliability_at(
    view: View,
    nearest: View,
    q: &Vector2<f64>,
    z_m: f64,
    z_a: f64,
    k: usize,
    e_tau: f64,
) -> Reliability {
    match (patch_error(view, nearest, q, z_m, k), patch_error(view, nearest, q, z_a, k)) {
        (Some(e_m), Some(e_a)) => reliability_from_errors(e_m, e_a, e_tau),
        (e_m, e_a) => Reliability {
            m_a: false,
            m_m: false,
            e_a: e_a.unwrap_or(f64::INFINITY),
            e_m: e_m.unwrap_or(f64::INFINITY),
        },
    }
}

#[derive(Debug, Clone)]
pub struct ReliabilityMask {
    pub m_a: Mask,
    pub m_m: Mask,
    pub e_a: Image,
    pub e_m: Image,
}

/// Per-pixel reliability of two depth maps of `view`.
pub fn reliability_mask(z_m: &Image, z_a: &Image, view: View, nearest: View, k: usize, e_tau: f64) -> ReliabilityMask {
    let (w, h) = (z_m.width, z_m.height);
    let rows: Vec<Vec<Reliability>> = (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .map(|x| {
                    let q = Vector2::new(x as f64, y as f64);
                    reliability_at(view, nearest, &q, z_m.get(x, y, 0), z_a.get(x, y, 0), k, e_tau)
                })
                .collect()
        })
        .collect();
    let mut out = ReliabilityMask {
        m_a: Mask::new(w, h, false),
        m_m: Mask::new(w, h, false),
        e_a: Image::new(w, h, 1),
        e_m: Image::new(w, h, 1),
    };
    for (y, row) in rows.into_iter().enumerate() {
        for (x, r) in row.into_iter().enumerate() {
            out.m_a.set(x, y, r.m_a);
            out.m_m.set(x, y, r.m_m);
            out.e_a.set(x, y, 0, r.e_a);
            out.e_m.set(x, y, 0, r.e_m);
        }
    }
    out
}

#[cfg(test)]
mod tests;
