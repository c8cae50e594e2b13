//! Differentiable volume rendering.

use nalgebra::Vector3;
use rand::{Rng, RngCore};

use crate::fields::{HexPlaneField, RadianceModel, SampleEval, SampleGrad};
use crate::geometry::{Camera, Ray, SampleSet, EPS_Z};

/// `T_i = exp(-sum_{j<i} delta_j sigma_j)`; `T_1 = 1`.
pub fn transmittance(sigma: &[f64], delta: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(sigma.len());
    let mut acc = 0.0f64;
    for (s, d) in sigma.iter().zip(delta) {
        out.push((-acc).exp());
        acc += s * d;
    }
    out
}

/// `w_i = T_i (1 - exp(-delta_i sigma_i))`.
pub fn render_weights(sigma: &[f64], delta: &[f64]) -> Vec<f64> {
    let t = transmittance(sigma, delta);
    sigma
        .iter()
        .zip(delta)
        .zip(&t)
        .map(|((s, d), t)| t * -(-s * d).exp_m1())
        .collect()
}

/// Weighted sum of per-sample payloads of width `channels`.
pub fn composite(values: &[f64], channels: usize, w: &[f64]) -> Vec<f64> {
    assert_eq!(values.len(), w.len() * channels);
    let mut out = vec![0.0; channels];
    for (i, wi) in w.iter().enumerate() {
        for c in 0..channels {
            out[c] += wi * values[i * channels + c];
        }
    }
    out
}

/// Gradient w.r.t. densities given upstream gradients on weights and
/// transmittances.
pub fn weights_backward(sigma: &[f64], delta: &[f64], g_w: &[f64], g_t: &[f64]) -> Vec<f64> {
    let n = sigma.len();
    let t = transmittance(sigma, delta);
    let mut g = vec![0.0; n];
    // suffix sum of g_w[i] w_i + g_T[i] T_i over i > k
    let mut tail = 0.0;
    for k in (0..n).rev() {
        let a = (-sigma[k] * delta[k]).exp();
        let w = t[k] * (1.0 - a);
        g[k] = g_w[k] * t[k] * delta[k] * a - delta[k] * tail;
        tail += g_w[k] * w + g_t.get(k).copied().unwrap_or(0.0) * t[k];
    }
    g
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderResult {
    pub color: [f64; 3],
    pub depth: f64,
    pub weights: Vec<f64>,
    pub transmittance: Vec<f64>,
    /// Accumulated opacity `sum w_i`.
    pub opacity: f64,
    /// Predicted transmittance along the primary direction, per sample.
    pub vis: Option<Vec<f64>>,
    /// Predicted transmittance towards the secondary camera, per sample.
    pub vis_secondary: Option<Vec<f64>>,
    /// Secondary-view visibility `t' = sum w_i T'_i`.
    pub t_prime: Option<f64>,
    /// Expected canonical point `sum w_i p'_i` (dynamic scenes).
    pub canonical_point: [f64; 3],
}

/// Time information for a ray; `frame` drives the motion field, `normalized`
/// the time-conditioned decoder.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RayTime {
    pub frame: f64,
    pub normalized: f64,
}

/// Forward state of one rendered ray, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct RayTrace {
    pub ray: Ray,
    pub samples: SampleSet,
    pub time: RayTime,
    /// Sample points before any motion.
    pub points: Vec<[f64; 3]>,
    /// Sample points in the canonical volume (equal to `points` when static).
    pub canonical: Vec<[f64; 3]>,
    pub secondary_dirs: Option<Vec<[f64; 3]>>,
    evals: Vec<SampleEval>,
    motion_caches: Vec<Vec<f64>>,
    pub result: RenderResult,
}

/// Upstream gradients on a ray's outputs.
#[derive(Debug, Clone, Default)]
pub struct RayGrad {
    pub color: [f64; 3],
    pub depth: f64,
    /// Direct per-sample gradients (empty means zero).
    pub weights: Vec<f64>,
    pub transmittance: Vec<f64>,
    pub vis: Vec<f64>,
    pub t_prime: f64,
    pub canonical_point: [f64; 3],
}

fn to_arr(v: &Vector3<f64>) -> [f64; 3] {
    [v.x, v.y, v.z]
}

/// Samples along `ray` for `model`: linear in depth, or in normalized inverse
/// depth for fields that define an `s_near`.
pub fn sample_ray(model: &RadianceModel, near: f64, far: f64, n: usize, jitter: Option<&mut dyn RngCore>) -> SampleSet {
    match model.field.s_near() {
        Some(s) => SampleSet::stratified_inverse(near, far, s, 1.0, n, jitter),
        None => SampleSet::stratified(near, far, n, jitter),
    }
}

/// Renders one ray. With `secondary`, per-sample directions towards that
/// camera feed the visibility head and `t'` is formed.
pub fn trace_ray(
    model: &RadianceModel,
    motion: Option<&HexPlaneField>,
    ray: &Ray,
    samples: SampleSet,
    time: RayTime,
    secondary: Option<&Camera>,
) -> RayTrace {
    let view = to_arr(&ray.view);
    let points: Vec<[f64; 3]> = samples.depths.iter().map(|&z| to_arr(&ray.at(z))).collect();
    let mut motion_caches = Vec::new();
    let canonical: Vec<[f64; 3]> = match motion {
        Some(m) => points
            .iter()
            .map(|p| {
                let mut cache = Vec::new();
                let d = m.query(p, time.frame, &mut cache);
                motion_caches.push(cache);
                [p[0] + d[0], p[1] + d[1], p[2] + d[2]]
            })
            .collect(),
        None => points.clone(),
    };
    let secondary_dirs: Option<Vec<[f64; 3]>> = secondary.map(|cam| {
        let c = cam.center();
        points
            .iter()
            .map(|p| {
                let d = Vector3::new(p[0] - c.x, p[1] - c.y, p[2] - c.z);
                to_arr(&(d / d.norm()))
            })
            .collect()
    });
    let evals: Vec<SampleEval> = canonical
        .iter()
        .enumerate()
        .map(|(i, p)| model.eval(p, &view, time.normalized, secondary_dirs.as_ref().map(|d| &d[i])))
        .collect();
    let sigma: Vec<f64> = evals.iter().map(|e| e.sigma).collect();
    let t = transmittance(&sigma, &samples.deltas);
    let w = render_weights(&sigma, &samples.deltas);
    let mut color = [0.0; 3];
    let mut depth = 0.0;
    let mut cp = [0.0; 3];
    for (i, e) in evals.iter().enumerate() {
        for c in 0..3 {
            color[c] += w[i] * e.rgb[c];
            cp[c] += w[i] * canonical[i][c];
        }
        depth += w[i] * samples.depths[i];
    }
    let vis = evals.iter().map(|e| e.vis).collect::<Option<Vec<f64>>>();
    let vis_secondary = if secondary.is_some() {
        evals.iter().map(|e| e.vis_secondary).collect::<Option<Vec<f64>>>()
    } else {
        None
    };
    let t_prime = vis_secondary.as_ref().map(|v| v.iter().zip(&w).map(|(a, b)| a * b).sum());
    let opacity = w.iter().sum();
    RayTrace {
        ray: *ray,
        samples,
        time,
        points,
        canonical,
        secondary_dirs,
        evals,
        motion_caches,
        result: RenderResult {
            color,
            depth,
            weights: w,
            transmittance: t,
            opacity,
            vis,
            vis_secondary,
            t_prime,
            canonical_point: cp,
        },
    }
}

/// Backward pass of [`trace_ray`]; accumulates parameter gradients of the
/// radiance model and, for dynamic rays, of the motion field.
pub fn backward_ray(
    model: &RadianceModel,
    motion: Option<&HexPlaneField>,
    trace: &RayTrace,
    g: &RayGrad,
    grads: &mut crate::fields::Grads,
    motion_grads: Option<&mut [Vec<f64>]>,
) {
    let n = trace.samples.len();
    let r = &trace.result;
    let mut g_w = vec![0.0; n];
    for i in 0..n {
        let e = &trace.evals[i];
        let mut gw = g.weights.get(i).copied().unwrap_or(0.0);
        for c in 0..3 {
            gw += g.color[c] * e.rgb[c] + g.canonical_point[c] * trace.canonical[i][c];
        }
        gw += g.depth * trace.samples.depths[i];
        if let Some(v) = e.vis_secondary {
            gw += g.t_prime * v;
        }
        g_w[i] = gw;
    }
    let sigma: Vec<f64> = trace.evals.iter().map(|e| e.sigma).collect();
    let g_sigma = weights_backward(&sigma, &trace.samples.deltas, &g_w, &g.transmittance);
    let view = to_arr(&trace.ray.view);
    let mut motion_grads = motion_grads;
    for i in 0..n {
        let w = r.weights[i];
        let sg = SampleGrad {
            sigma: g_sigma[i],
            rgb: g.color.map(|c| c * w),
            vis: g.vis.get(i).copied().unwrap_or(0.0),
            vis_secondary: g.t_prime * w,
        };
        let dp = model.backward(&trace.canonical[i], &view, trace.time.normalized, &trace.evals[i], &sg, grads);
        if let (Some(m), Some(mg)) = (motion, motion_grads.as_deref_mut()) {
            let d = [0, 1, 2].map(|a| dp[a] + g.canonical_point[a] * w);
            m.backward(&trace.points[i], trace.time.frame, &trace.motion_caches[i], &d, mg);
        }
    }
}

/// Exact secondary-view transmittance of each point by marching `n` steps
/// from the secondary camera; points behind that camera get 0.
pub fn secondary_visibility_exact(
    points: &[[f64; 3]],
    secondary: &Camera,
    model: &RadianceModel,
    near: f64,
    n: usize,
) -> Vec<f64> {
    let mut cache = Vec::new();
    points
        .iter()
        .map(|p| {
            let pw = Vector3::new(p[0], p[1], p[2]);
            let pc = secondary.world_to_camera(&pw);
            if pc.z <= EPS_Z {
                return 0.0;
            }
            if pc.z <= near {
                return 1.0;
            }
            let dir = secondary.rotation * (pc / pc.z);
            let o = secondary.center();
            let step = (pc.z - near) / n as f64;
            let mut tau = 0.0;
            for j in 0..n {
                let z = near + j as f64 * step;
                let q = o + dir * z;
                if let Some((s, _)) = model.field.query(&[q.x, q.y, q.z], &mut cache) {
                    tau += s * step;
                }
            }
            (-tau).exp()
        })
        .collect()
}

/// Draws `n_fine` depths from the piecewise-constant density proportional to
/// the coarse weights (bin `i` spans `[z_i, z_{i+1})`, the last bin ends at
/// `far`), merges them with the coarse depths and sorts.
pub fn hierarchical_resample(weights: &[f64], depths: &[f64], far: f64, n_fine: usize, rng: &mut impl Rng) -> SampleSet {
    let n = depths.len();
    let edges: Vec<f64> = depths.iter().copied().chain(std::iter::once(far)).collect();
    let total: f64 = weights.iter().map(|w| w.max(0.0)).sum();
    let mut fine = Vec::with_capacity(n_fine);
    if total <= 1e-12 {
        let step = (far - depths[0]) / n_fine as f64;
        for k in 0..n_fine {
            fine.push(depths[0] + (k as f64 + rng.gen::<f64>()) * step);
        }
    } else {
        let mut cdf = Vec::with_capacity(n + 1);
        cdf.push(0.0);
        let mut acc = 0.0;
        for w in weights {
            acc += w.max(0.0) / total;
            cdf.push(acc);
        }
        cdf[n] = 1.0;
        for k in 0..n_fine {
            let u = (k as f64 + rng.gen::<f64>()) / n_fine as f64;
            // first bin whose upper cdf exceeds u
            let mut b = cdf.partition_point(|&c| c <= u).saturating_sub(1).min(n - 1);
            while weights[b] <= 0.0 && b + 1 < n {
                b += 1;
            }
            let span = cdf[b + 1] - cdf[b];
            let f = if span > 0.0 { ((u - cdf[b]) / span).clamp(0.0, 1.0) } else { 0.0 };
            fine.push(edges[b] + f * (edges[b + 1] - edges[b]));
        }
    }
    let mut all: Vec<f64> = depths.iter().copied().chain(fine).filter(|&z| z < far).collect();
    all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    all.dedup();
    SampleSet::from_depths(all, far).expect("merged samples are sorted and below far")
}

/// Renders a full image: color, expected depth and opacity.
pub fn render_image(
    model: &RadianceModel,
    motion: Option<&HexPlaneField>,
    camera: &Camera,
    near: f64,
    far: f64,
    n_samples: usize,
    time: RayTime,
) -> (crate::image::Image, crate::image::Image) {
    use rayon::prelude::*;
    let (w, h) = (camera.width, camera.height);
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut rgb = Vec::with_capacity(w * 3);
            let mut depth = Vec::with_capacity(w);
            for x in 0..w {
                let ray = camera.ray(&nalgebra::Vector2::new(x as f64, y as f64));
                let s = sample_ray(model, near, far, n_samples, None);
                let t = trace_ray(model, motion, &ray, s, time, None);
                rgb.extend_from_slice(&t.result.color);
                depth.push(t.result.depth);
            }
            (rgb, depth)
        })
        .collect();
    let mut img = crate::image::Image::new(w, h, 3);
    let mut dep = crate::image::Image::new(w, h, 1);
    for (y, (r, d)) in rows.into_iter().enumerate() {
        img.data[y * w * 3..(y + 1) * w * 3].copy_from_slice(&r);
        dep.data[y * w..(y + 1) * w].copy_from_slice(&d);
    }
    (img, dep)
}
