//! Synthetic sparse-depth and sparse-flow oracles.
//!
//! Text formats, one record per line, `#` starts a comment:
//!
//! ```text
//! view t x y z
//! v t x y u s x' y'
//! ```
//!
//! A flow record matches pixel `(x, y)` of view `v` at frame `t` with pixel
//! `(x', y')` of view `u` at frame `s`.

use nalgebra::{Vector2, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::image::Image;
use crate::scenes::SceneSpec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparseDepthPoint {
    pub view: usize,
    pub t: usize,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparseFlowMatch {
    pub v: usize,
    pub t: usize,
    pub x: f64,
    pub y: f64,
    pub u: usize,
    pub s: usize,
    pub x2: f64,
    pub y2: f64,
}

impl SparseFlowMatch {
    pub fn flow(&self) -> Vector2<f64> {
        Vector2::new(self.x2 - self.x, self.y2 - self.y)
    }
}

pub fn depth_to_text(points: &[SparseDepthPoint]) -> String {
    let mut s = String::from("# view t x y z\n");
    for p in points {
        s += &format!("{} {} {} {} {}\n", p.view, p.t, p.x, p.y, p.z);
    }
    s
}

pub fn flow_to_text(matches: &[SparseFlowMatch]) -> String {
    let mut s = String::from("# v t x y u s x' y'\n");
    for m in matches {
        s += &format!("{} {} {} {} {} {} {} {}\n", m.v, m.t, m.x, m.y, m.u, m.s, m.x2, m.y2);
    }
    s
}

fn records(text: &str, n: usize) -> impl Iterator<Item = Result<(usize, Vec<&str>), String>> {
    text.lines().enumerate().filter_map(move |(i, line)| {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            return None;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        Some(if f.len() == n { Ok((i + 1, f)) } else { Err(format!("line {}: expected {n} fields", i + 1)) })
    })
}

fn field<T: std::str::FromStr>(f: &str, line: usize) -> Result<T, String> {
    f.parse().map_err(|_| format!("line {line}: cannot parse `{f}`"))
}

pub fn depth_from_text(text: &str) -> Result<Vec<SparseDepthPoint>, String> {
    records(text, 5)
        .map(|r| {
            let (l, f) = r?;
            let p = SparseDepthPoint {
                view: field(f[0], l)?,
                t: field(f[1], l)?,
                x: field(f[2], l)?,
                y: field(f[3], l)?,
                z: field(f[4], l)?,
            };
            if !(p.z > 0.0) {
                return Err(format!("line {l}: depth must be positive"));
            }
            Ok(p)
        })
        .collect()
}

pub fn flow_from_text(text: &str) -> Result<Vec<SparseFlowMatch>, String> {
    records(text, 8)
        .map(|r| {
            let (l, f) = r?;
            Ok(SparseFlowMatch {
                v: field(f[0], l)?,
                t: field(f[1], l)?,
                x: field(f[2], l)?,
                y: field(f[3], l)?,
                u: field(f[4], l)?,
                s: field(f[5], l)?,
                x2: field(f[6], l)?,
                y2: field(f[7], l)?,
            })
        })
        .collect()
}

/// Sobel gradient magnitude of the luma.
pub fn gradient_magnitude(img: &Image) -> Image {
    let l = img.luma();
    let (w, h) = (l.width, l.height);
    let at = |x: i64, y: i64| l.get(x.clamp(0, w as i64 - 1) as usize, y.clamp(0, h as i64 - 1) as usize, 0);
    Image::from_fn(w, h, 1, |x, y, _| {
        let (x, y) = (x as i64, y as i64);
        let gx = at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1)
            - at(x - 1, y - 1)
            - 2.0 * at(x - 1, y)
            - at(x - 1, y + 1);
        let gy = at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1)
            - at(x - 1, y - 1)
            - 2.0 * at(x, y - 1)
            - at(x + 1, y - 1);
        (gx * gx + gy * gy).sqrt()
    })
}

/// Pixels in the upper half of the gradient-magnitude distribution among
/// those accepted by `keep`, in raster order.
fn textured_pixels(img: &Image, keep: impl Fn(usize, usize) -> bool) -> Vec<(usize, usize)> {
    let g = gradient_magnitude(img);
    let mut cand: Vec<(usize, usize)> = Vec::new();
    for y in 0..img.height {
        for x in 0..img.width {
            if keep(x, y) {
                cand.push((x, y));
            }
        }
    }
    if cand.is_empty() {
        return cand;
    }
    let mut mags: Vec<f64> = cand.iter().map(|&(x, y)| g.get(x, y, 0)).collect();
    mags.sort_by(f64::total_cmp);
    let median = mags[mags.len() / 2];
    cand.retain(|&(x, y)| g.get(x, y, 0) >= median);
    cand
}

fn stream(seed: u64, a: usize, b: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((a as u64) << 32) | b as u64);
    rng
}

/// `count` textured surface pixels of every listed view at frame `t`, with
/// their ground-truth depth scaled by `1 + noise * U[-1, 1]`.
pub fn oracle_sparse_depth(
    spec: &SceneSpec,
    views: &[usize],
    t: usize,
    count: usize,
    noise: f64,
    seed: u64,
) -> Vec<SparseDepthPoint> {
    let mut out = Vec::new();
    if count == 0 {
        return out;
    }
    for &view in views {
        let (rgb, depth) = spec.render_gt(view, t);
        let ids = spec.primitive_ids(view, t);
        let mut cand = textured_pixels(&rgb, |x, y| ids[y * rgb.width + x] != usize::MAX);
        let mut rng = stream(seed, view, t);
        cand.shuffle(&mut rng);
        cand.truncate(count);
        cand.sort_unstable_by_key(|&(x, y)| (y, x));
        for (x, y) in cand {
            let z = depth.get(x, y, 0);
            let scale = if noise > 0.0 { 1.0 + noise * rng.gen_range(-1.0..=1.0) } else { 1.0 };
            out.push(SparseDepthPoint { view, t, x: x as f64, y: y as f64, z: z * scale });
        }
    }
    out
}

/// Ground-truth correspondences from `(view v, frame t)` to `(view u, frame
/// s)` at up to `count` textured pixels visible in both. Targets are
/// perturbed by `noise * U[-1, 1]` pixels per axis.
pub fn oracle_sparse_flow(
    spec: &SceneSpec,
    (t, v): (usize, usize),
    (s, u): (usize, usize),
    count: usize,
    noise: f64,
    seed: u64,
) -> Vec<SparseFlowMatch> {
    let mut out = Vec::new();
    if count == 0 {
        return out;
    }
    let src = spec.camera(v, t);
    let dst = spec.camera(u, s);
    let (rgb, _) = spec.render_gt(v, t);
    let dt = s as f64 - t as f64;
    let target = |x: usize, y: usize| -> Option<Vector2<f64>> {
        let hit = spec.hit_at(src, &Vector2::new(x as f64, y as f64), t as f64)?;
        let vel = Vector3::from(spec.primitives[hit.primitive].velocity);
        let moved = hit.point + vel * dt;
        let (q, _) = dst.project(&moved).ok()?;
        spec.point_visible(dst, &moved, s as f64).then_some(q)
    };
    let mut cand = textured_pixels(&rgb, |x, y| target(x, y).is_some());
    let mut rng = stream(seed, v * 4096 + u, t * 4096 + s);
    cand.shuffle(&mut rng);
    cand.truncate(count);
    cand.sort_unstable_by_key(|&(x, y)| (y, x));
    for (x, y) in cand {
        let mut q = target(x, y).expect("candidate has a target");
        if noise > 0.0 {
            q.x += noise * rng.gen_range(-1.0..=1.0);
            q.y += noise * rng.gen_range(-1.0..=1.0);
        }
        out.push(SparseFlowMatch { v, t, x: x as f64, y: y as f64, u, s, x2: q.x, y2: q.y });
    }
    out
}

/// Matches for every frame `t`, every ordered view pair, and `s = t +- delta`
/// where that frame exists.
pub fn oracle_flow_set(spec: &SceneSpec, delta: usize, count: usize, noise: f64, seed: u64) -> Vec<SparseFlowMatch> {
    let mut out = Vec::new();
    for t in 0..spec.frames {
        let targets = [t.checked_sub(delta), Some(t + delta).filter(|&s| s < spec.frames)];
        for s in targets.into_iter().flatten() {
            if s == t {
                continue;
            }
            for v in 0..spec.views() {
                for u in 0..spec.views() {
                    out.extend(oracle_sparse_flow(spec, (t, v), (s, u), count, noise, seed));
                }
            }
        }
    }
    out
}
