//! Procedural scenes with exact ground truth.

pub mod io;
pub mod presets;

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Camera;
use crate::image::{Image, Mask};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Texture {
    /// Alternating cubes of side `size` (meters).
    Checker { size: f64, a: [f64; 3], b: [f64; 3] },
    /// `base + x * dx + y * dy + z * dz` in primitive-local coordinates,
    /// clamped to `[0, 1]`.
    Gradient {
        base: [f64; 3],
        dx: [f64; 3],
        dy: [f64; 3],
        #[serde(default)]
        dz: [f64; 3],
    },
    /// Smooth value noise with lattice spacing `scale` (meters); channel `c`
    /// blends from `a[c]` to `b[c]` with its own noise stream.
    Noise { scale: f64, seed: u64, a: [f64; 3], b: [f64; 3] },
}

fn lattice(seed: u64, i: i64, j: i64, k: i64) -> f64 {
    let mut z = seed
        ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (j as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ (k as u64).wrapping_mul(0x1656_67B1_9E37_79F9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

fn value_noise(seed: u64, p: &Vector3<f64>) -> f64 {
    let f = p.map(f64::floor);
    let t = (p - f).map(|u| u * u * (3.0 - 2.0 * u));
    let (i, j, k) = (f.x as i64, f.y as i64, f.z as i64);
    let mut acc = 0.0;
    for c in 0..8 {
        let (di, dj, dk) = (c & 1, (c >> 1) & 1, (c >> 2) & 1);
        let w = (if di == 1 { t.x } else { 1.0 - t.x })
            * (if dj == 1 { t.y } else { 1.0 - t.y })
            * (if dk == 1 { t.z } else { 1.0 - t.z });
        acc += w * lattice(seed, i + di, j + dj, k + dk);
    }
    acc
}

impl Texture {
    pub fn albedo(&self, p: &Vector3<f64>) -> [f64; 3] {
        match self {
            Texture::Checker { size, a, b } => {
                let k = (p.x / size).floor() + (p.y / size).floor() + (p.z / size).floor();
                if (k as i64).rem_euclid(2) == 0 {
                    *a
                } else {
                    *b
                }
            }
            Texture::Gradient { base, dx, dy, dz } => {
                std::array::from_fn(|c| (base[c] + p.x * dx[c] + p.y * dy[c] + p.z * dz[c]).clamp(0.0, 1.0))
            }
            Texture::Noise { scale, seed, a, b } => {
                let q = p / *scale;
                std::array::from_fn(|c| {
                    // staggered lattices keep the flat lines of each channel apart
                    let shift = Vector3::new(0.31, 0.47, 0.23) * c as f64;
                    let n = value_noise(seed.wrapping_add(c as u64 * 7919), &(q + shift));
                    a[c] + (b[c] - a[c]) * n
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    /// Plane `z = depth` facing the cameras, unbounded.
    Plane { depth: f64 },
    Box { min: [f64; 3], max: [f64; 3] },
    Sphere { center: [f64; 3], radius: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Primitive {
    pub shape: Shape,
    pub texture: Texture,
    /// Strength of the view-dependent term `c (v . n)`.
    #[serde(default)]
    pub tint: f64,
    /// Constant velocity in meters per frame.
    #[serde(default)]
    pub velocity: [f64; 3],
}

impl Primitive {
    fn anchor(&self) -> Vector3<f64> {
        match &self.shape {
            Shape::Plane { depth } => Vector3::new(0.0, 0.0, *depth),
            Shape::Box { min, .. } => Vector3::from(*min),
            Shape::Sphere { center, .. } => Vector3::from(*center),
        }
    }

    fn offset(&self, t: f64) -> Vector3<f64> {
        Vector3::from(self.velocity) * t
    }

    /// Ray parameter and outward normal of the first hit with `s > s_min`.
    fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>, t: f64, s_min: f64) -> Option<(f64, Vector3<f64>)> {
        let o = o - self.offset(t);
        match &self.shape {
            Shape::Plane { depth } => {
                if d.z.abs() < 1e-15 {
                    return None;
                }
                let s = (depth - o.z) / d.z;
                (s > s_min).then(|| (s, Vector3::new(0.0, 0.0, -d.z.signum())))
            }
            Shape::Box { min, max } => {
                let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
                let mut axis_lo = 0;
                let mut sign_lo = 0.0;
                for a in 0..3 {
                    if d[a].abs() < 1e-15 {
                        if o[a] < min[a] || o[a] > max[a] {
                            return None;
                        }
                        continue;
                    }
                    let t1 = (min[a] - o[a]) / d[a];
                    let t2 = (max[a] - o[a]) / d[a];
                    let (near, far, s) = if t1 < t2 { (t1, t2, -1.0) } else { (t2, t1, 1.0) };
                    if near > lo {
                        lo = near;
                        axis_lo = a;
                        sign_lo = s;
                    }
                    hi = hi.min(far);
                }
                if lo > hi || lo <= s_min {
                    return None;
                }
                let mut n = Vector3::zeros();
                n[axis_lo] = sign_lo;
                Some((lo, n))
            }
            Shape::Sphere { center, radius } => {
                let c = Vector3::from(*center);
                let oc = o - c;
                let a = d.dot(d);
                let b = oc.dot(d);
                let cc = oc.dot(&oc) - radius * radius;
                let disc = b * b - a * cc;
                if disc < 0.0 {
                    return None;
                }
                let s = (-b - disc.sqrt()) / a;
                if s <= s_min {
                    return None;
                }
                let n = (o + d * s - c) / *radius;
                Some((s, n))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
    pub background: [f64; 3],
    /// Cameras indexed `[view][frame]`.
    pub cameras: Vec<Vec<Camera>>,
    pub frames: usize,
    pub z_near: f64,
    pub z_far: f64,
}

/// First surface hit along a camera ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub primitive: usize,
    /// Camera-frame depth.
    pub depth: f64,
    pub point: Vector3<f64>,
    pub normal: Vector3<f64>,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.cameras.is_empty() || self.frames == 0 {
            return Err(Error::Config("scene needs at least one view and one frame".into()));
        }
        if self.cameras.iter().any(|v| v.len() != self.frames) {
            return Err(Error::Config("every view needs one camera per frame".into()));
        }
        if !(self.z_near > 0.0 && self.z_far > self.z_near) {
            return Err(Error::Config("scene depth range must satisfy 0 < z_near < z_far".into()));
        }
        for p in &self.primitives {
            if p.velocity.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config("primitive velocity must be finite".into()));
            }
        }
        Ok(())
    }

    pub fn views(&self) -> usize {
        self.cameras.len()
    }

    pub fn camera(&self, view: usize, t: usize) -> &Camera {
        &self.cameras[view][t]
    }

    /// First hit along `o + s d` at time `t`; `d` has unit camera-frame z,
    /// so `s` is the camera-frame depth.
    pub fn trace(&self, o: &Vector3<f64>, d: &Vector3<f64>, t: f64) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for (k, p) in self.primitives.iter().enumerate() {
            if let Some((s, n)) = p.intersect(o, d, t, 1e-9) {
                if best.is_none_or(|b| s < b.depth) {
                    best = Some(Hit { primitive: k, depth: s, point: o + d * s, normal: n });
                }
            }
        }
        best
    }

    /// Shaded color of a hit seen along unit direction `v`.
    pub fn shade(&self, hit: &Hit, v: &Vector3<f64>, t: f64) -> [f64; 3] {
        let p = &self.primitives[hit.primitive];
        let local = hit.point - p.offset(t) - p.anchor();
        let mut c = p.texture.albedo(&local);
        if p.tint != 0.0 {
            let s = p.tint * v.dot(&hit.normal);
            c = c.map(|x| (x + s).clamp(0.0, 1.0));
        }
        c
    }

    pub fn hit_at(&self, cam: &Camera, pixel: &Vector2<f64>, t: f64) -> Option<Hit> {
        let ray = cam.ray(pixel);
        self.trace(&ray.origin, &ray.direction, t)
    }

    /// Color and depth images of a view at frame `t`. Rays that hit nothing
    /// see the background color at depth `z_far`.
    pub fn render_gt(&self, view: usize, t: usize) -> (Image, Image) {
        self.render_camera(self.camera(view, t), t as f64)
    }

    pub fn render_camera(&self, cam: &Camera, t: f64) -> (Image, Image) {
        let (w, h) = (cam.width, cam.height);
        let rows: Vec<Vec<(f64, [f64; 3])>> = (0..h)
            .into_par_iter()
            .map(|y| {
                (0..w)
                    .map(|x| {
                        let ray = cam.ray(&Vector2::new(x as f64, y as f64));
                        match self.trace(&ray.origin, &ray.direction, t) {
                            Some(hit) => (hit.depth, self.shade(&hit, &ray.view, t)),
                            None => (self.z_far, self.background),
                        }
                    })
                    .collect()
            })
            .collect();
        let mut rgb = Image::new(w, h, 3);
        let mut depth = Image::new(w, h, 1);
        for (y, row) in rows.into_iter().enumerate() {
            for (x, (d, c)) in row.into_iter().enumerate() {
                depth.set(x, y, 0, d);
                rgb.pixel_mut(x, y).copy_from_slice(&c);
            }
        }
        (rgb, depth)
    }

    /// Whether world point `p` is the first surface seen from `cam` and falls
    /// inside its image.
    pub fn point_visible(&self, cam: &Camera, p: &Vector3<f64>, t: f64) -> bool {
        let Ok((px, z)) = cam.project(p) else {
            return false;
        };
        if !cam.in_bounds(&px) {
            return false;
        }
        let o = cam.center();
        let d = (p - o) / z;
        match self.trace(&o, &d, t) {
            Some(hit) => hit.depth >= z * (1.0 - 1e-6) - 1e-9,
            None => true,
        }
    }

    /// Pixels of `primary` whose surface point is visible in `secondary`.
    pub fn gt_visibility(&self, primary: usize, secondary: usize, t: usize) -> Mask {
        let a = self.camera(primary, t);
        let b = self.camera(secondary, t);
        let tf = t as f64;
        let mut m = Mask::new(a.width, a.height, false);
        for y in 0..a.height {
            for x in 0..a.width {
                let px = Vector2::new(x as f64, y as f64);
                let p = match self.hit_at(a, &px, tf) {
                    Some(h) => h.point,
                    None => a.backproject(&px, self.z_far),
                };
                m.set(x, y, self.point_visible(b, &p, tf));
            }
        }
        m
    }

    /// Per-pixel object motion from frame `t` to frame `s` seen by a camera
    /// held fixed at `view`'s pose at `t`: channels are pixel dx, dy and
    /// camera-frame dz.
    pub fn gt_object_flow(&self, view: usize, t: usize, s: usize) -> Image {
        let cam = self.camera(view, t);
        let dt = s as f64 - t as f64;
        let mut out = Image::new(cam.width, cam.height, 3);
        for y in 0..cam.height {
            for x in 0..cam.width {
                let px = Vector2::new(x as f64, y as f64);
                let Some(hit) = self.hit_at(cam, &px, t as f64) else {
                    continue;
                };
                let v = Vector3::from(self.primitives[hit.primitive].velocity);
                if v == Vector3::zeros() {
                    continue;
                }
                let moved = hit.point + v * dt;
                if let Ok((q, z)) = cam.project(&moved) {
                    out.pixel_mut(x, y).copy_from_slice(&[q.x - px.x, q.y - px.y, z - hit.depth]);
                }
            }
        }
        out
    }

    /// Index of the primitive seen at each pixel (`usize::MAX` for none).
    pub fn primitive_ids(&self, view: usize, t: usize) -> Vec<usize> {
        let cam = self.camera(view, t);
        let mut out = Vec::with_capacity(cam.width * cam.height);
        for y in 0..cam.height {
            for x in 0..cam.width {
                let px = Vector2::new(x as f64, y as f64);
                out.push(self.hit_at(cam, &px, t as f64).map_or(usize::MAX, |h| h.primitive));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests;
