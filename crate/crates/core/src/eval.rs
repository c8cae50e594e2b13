//! Image quality, geometry and visibility metrics.

use std::fmt::Write as _;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::geometry::Camera;
use crate::image::{sample_bilinear_into, Image, Mask};

/// PSNR in dB; identical inputs give `+inf`.
pub fn psnr(a: &Image, b: &Image, peak: f64) -> f64 {
    psnr_from_mse(mse(a, b, None), peak)
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        return f64::INFINITY;
    }
    10.0 * (peak * peak / mse).log10()
}

/// Mean squared error over all channels of the masked pixels.
pub fn mse(a: &Image, b: &Image, mask: Option<&Mask>) -> f64 {
    assert!(a.same_shape(b), "image shapes differ");
    let mut acc = 0.0;
    let mut n = 0usize;
    for i in 0..a.len_pixels() {
        if mask.is_some_and(|m| !m.data[i]) {
            continue;
        }
        for c in 0..a.channels {
            let d = a.data[i * a.channels + c] - b.data[i * a.channels + c];
            acc += d * d;
        }
        n += a.channels;
    }
    if n == 0 {
        0.0
    } else {
        acc / n as f64
    }
}

pub fn psnr_masked(a: &Image, b: &Image, mask: &Mask, peak: f64) -> f64 {
    psnr_from_mse(mse(a, b, Some(mask)), peak)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub peak: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self { window: 11, sigma: 1.5, k1: 0.01, k2: 0.03, peak: 1.0 }
    }
}

fn gaussian(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let k: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable correlation keeping only fully covered positions.
fn filter_valid(x: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for ox in 0..ow {
            tmp[y * ow + ox] = (0..n).map(|i| k[i] * x[y * w + ox + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for oy in 0..oh {
        for ox in 0..ow {
            out[oy * ow + ox] = (0..n).map(|i| k[i] * tmp[(oy + i) * ow + ox]).sum();
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: spreads an output-sized map back onto the
/// input grid.
fn filter_adjoint(m: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut tmp = vec![0.0; ow * h];
    for oy in 0..oh {
        for ox in 0..ow {
            let v = m[oy * ow + ox];
            for i in 0..n {
                tmp[(oy + i) * ow + ox] += k[i] * v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for ox in 0..ow {
            let v = tmp[y * ow + ox];
            for i in 0..n {
                out[y * w + ox + i] += k[i] * v;
            }
        }
    }
    out
}

fn effective_window(p: &SsimParams, w: usize, h: usize) -> usize {
    let m = p.window.min(w).min(h);
    if m % 2 == 0 {
        m - 1
    } else {
        m
    }
}

/// Mean SSIM of two single-channel planes and, if requested, its gradient
/// with respect to `y`.
pub fn ssim_plane(x: &[f64], y: &[f64], w: usize, h: usize, p: &SsimParams, want_grad: bool) -> (f64, Option<Vec<f64>>) {
    let n = effective_window(p, w, h).max(1);
    let k = gaussian(n, p.sigma);
    let c1 = (p.k1 * p.peak).powi(2);
    let c2 = (p.k2 * p.peak).powi(2);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mx = filter_valid(x, w, h, &k);
    let my = filter_valid(y, w, h, &k);
    let exx = filter_valid(&xx, w, h, &k);
    let eyy = filter_valid(&yy, w, h, &k);
    let exy = filter_valid(&xy, w, h, &k);
    let m = mx.len();
    let mut total = 0.0;
    let (mut ga, mut gb, mut gc) = (vec![0.0; m], vec![0.0; m], vec![0.0; m]);
    for i in 0..m {
        let vx = exx[i] - mx[i] * mx[i];
        let vy = eyy[i] - my[i] * my[i];
        let cxy = exy[i] - mx[i] * my[i];
        let n1 = 2.0 * mx[i] * my[i] + c1;
        let n2 = 2.0 * cxy + c2;
        let d1 = mx[i] * mx[i] + my[i] * my[i] + c1;
        let d2 = vx + vy + c2;
        let s = n1 * n2 / (d1 * d2);
        total += s;
        if want_grad {
            let d = d1 * d2;
            ga[i] = (2.0 * mx[i] * n2 - s * 2.0 * my[i] * d2) / d;
            gb[i] = -s / d2;
            gc[i] = 2.0 * n1 / d;
        }
    }
    let value = total / m as f64;
    if !want_grad {
        return (value, None);
    }
    let inv = 1.0 / m as f64;
    let bmy: Vec<f64> = gb.iter().zip(&my).map(|(b, u)| b * u).collect();
    let cmx: Vec<f64> = gc.iter().zip(&mx).map(|(c, u)| c * u).collect();
    let a_ = filter_adjoint(&ga, w, h, &k);
    let b_ = filter_adjoint(&gb, w, h, &k);
    let bm = filter_adjoint(&bmy, w, h, &k);
    let c_ = filter_adjoint(&gc, w, h, &k);
    let cm = filter_adjoint(&cmx, w, h, &k);
    let g = (0..w * h)
        .map(|q| inv * (a_[q] + 2.0 * y[q] * b_[q] - 2.0 * bm[q] + x[q] * c_[q] - cm[q]))
        .collect();
    (value, Some(g))
}

/// Mean SSIM; rgb inputs are compared on their luma.
pub fn ssim(a: &Image, b: &Image, p: &SsimParams) -> f64 {
    assert!(a.same_shape(b), "image shapes differ");
    let (la, lb) = (a.luma(), b.luma());
    ssim_plane(&la.data, &lb.data, a.width, a.height, p, false).0
}

/// Average ranks (1-based), ties sharing the mean of their positions.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return if saa == sbb { 1.0 } else { 0.0 };
    }
    sab / (saa * sbb).sqrt()
}

pub fn srocc(a: &[f64], b: &[f64]) -> f64 {
    pearson(&ranks(a), &ranks(b))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub mae: f64,
    pub rmse: f64,
    pub srocc: f64,
}

pub fn depth_metrics(z: &Image, z_ref: &Image, mask: Option<&Mask>) -> DepthMetrics {
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for i in 0..z.data.len() {
        if mask.is_none_or(|m| m.data[i]) {
            a.push(z.data[i]);
            b.push(z_ref.data[i]);
        }
    }
    if a.is_empty() {
        return DepthMetrics { mae: 0.0, rmse: 0.0, srocc: 1.0 };
    }
    let n = a.len() as f64;
    let mae = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / n;
    let rmse = (a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n).sqrt();
    DepthMetrics { mae, rmse, srocc: srocc(&a, &b) }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Precision, recall and F1 with visible (`true`) as the positive class.
/// Empty denominators count as perfect scores.
pub fn visibility_prf(pred: &Mask, reference: &Mask) -> Prf {
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&p, &r) in pred.data.iter().zip(&reference.data) {
        match (p, r) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 1.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fneg);
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Prf { precision, recall, f1 }
}

/// Mean end-point error of the first two channels over the masked pixels.
pub fn aepe(pred: &Image, gt: &Image, mask: Option<&Mask>) -> f64 {
    let mut acc = 0.0;
    let mut n = 0usize;
    for i in 0..pred.len_pixels() {
        if mask.is_some_and(|m| !m.data[i]) {
            continue;
        }
        let dx = pred.data[i * pred.channels] - gt.data[i * gt.channels];
        let dy = pred.data[i * pred.channels + 1] - gt.data[i * gt.channels + 1];
        acc += (dx * dx + dy * dy).sqrt();
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        acc / n as f64
    }
}

/// Pixels of `view` whose ground-truth surface point reprojects into at
/// least one of `others` with a consistent depth (relative tolerance
/// `rel_tol`).
pub fn covisibility_mask(depth: &Image, view: &Camera, others: &[(&Camera, &Image)], rel_tol: f64) -> Mask {
    let mut m = Mask::new(depth.width, depth.height, false);
    let mut buf = [0.0];
    for y in 0..depth.height {
        for x in 0..depth.width {
            let p = view.backproject(&Vector2::new(x as f64, y as f64), depth.get(x, y, 0));
            let ok = others.iter().any(|(cam, d)| {
                let Ok((q, z)) = cam.project(&p) else {
                    return false;
                };
                sample_bilinear_into(d, q.x, q.y, &mut buf) && (buf[0] - z).abs() <= rel_tol * z
            });
            m.set(x, y, ok);
        }
    }
    m
}

/// Metrics gathered for one evaluation; absent inputs leave fields empty.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub depth_mae: Option<f64>,
    pub depth_rmse: Option<f64>,
    pub depth_srocc: Option<f64>,
    pub aepe: Option<f64>,
    pub visibility: Option<Prf>,
}

fn fmt_metric(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.6}")
    }
}

impl MetricReport {
    fn entries(&self) -> Vec<(&'static str, f64)> {
        let mut e = Vec::new();
        let mut push = |k, v: Option<f64>| {
            if let Some(v) = v {
                e.push((k, v));
            }
        };
        push("psnr", self.psnr);
        push("ssim", self.ssim);
        push("depth_mae", self.depth_mae);
        push("depth_rmse", self.depth_rmse);
        push("depth_srocc", self.depth_srocc);
        push("aepe", self.aepe);
        if let Some(v) = self.visibility {
            push("precision", Some(v.precision));
            push("recall", Some(v.recall));
            push("f1", Some(v.f1));
        }
        e
    }

    /// `key=value` lines.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k}={}", fmt_metric(v));
        }
        s
    }

    /// Aligned two-column table.
    pub fn to_table(&self) -> String {
        let mut s = String::from("metric        value\n");
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k:<13} {}", fmt_metric(v));
        }
        s
    }
}
