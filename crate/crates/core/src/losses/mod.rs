//! Training objectives with their adjoints.
//!
//! Stop-gradient terms take the live and the stopped copy of an argument as
//! separate inputs; gradients are returned for the live copies only, so the
//! adjoint through a stopped copy is exactly zero by construction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{ssim_plane, SsimParams};
use crate::image::Image;

/// Mean squared error over rays and channels.
pub fn photometric(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> (f64, Vec<[f64; 3]>) {
    assert_eq!(pred.len(), gt.len());
    if pred.is_empty() {
        return (0.0, Vec::new());
    }
    let n = (3 * pred.len()) as f64;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| {
            std::array::from_fn(|c| {
                let d = p[c] - g[c];
                loss += d * d;
                2.0 * d / n
            })
        })
        .collect();
    (loss / n, grad)
}

/// One-sided visibility prior loss `mean max(tau' - t', 0)`.
pub fn vip(tau: &[bool], t_prime: &[f64]) -> (f64, Vec<f64>) {
    assert_eq!(tau.len(), t_prime.len());
    if tau.is_empty() {
        return (0.0, Vec::new());
    }
    let n = tau.len() as f64;
    let mut loss = 0.0;
    let grad = tau
        .iter()
        .zip(t_prime)
        .map(|(&v, &t)| {
            let r = if v { 1.0 - t } else { 0.0 };
            if r > 0.0 {
                loss += r;
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    (loss / n, grad)
}

/// Gradients of a two-argument stop-gradient loss.
#[derive(Debug, Clone, PartialEq)]
pub struct PairGrad {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

/// `sum_i (sg_t_i - t_hat_i)^2 + (t_i - sg_t_hat_i)^2` over the samples of
/// one ray.
pub fn visibility_consistency_sg(t: &[f64], t_sg: &[f64], t_hat: &[f64], t_hat_sg: &[f64]) -> (f64, PairGrad) {
    let n = t.len();
    let mut loss = 0.0;
    let mut g = PairGrad { a: vec![0.0; n], b: vec![0.0; n] };
    for i in 0..n {
        let d1 = t_sg[i] - t_hat[i];
        let d2 = t[i] - t_hat_sg[i];
        loss += d1 * d1 + d2 * d2;
        g.a[i] = 2.0 * d2;
        g.b[i] = -2.0 * d1;
    }
    (loss, g)
}

/// Visibility consistency with both copies taken from the same values;
/// `a` is the gradient on `T`, `b` on `T_hat`.
pub fn visibility_consistency(t: &[f64], t_hat: &[f64]) -> (f64, PairGrad) {
    visibility_consistency_sg(t, t, t_hat, t_hat)
}

/// Mean squared depth error over keypoints.
pub fn sparse_depth(z: &[f64], z_ref: &[f64]) -> (f64, Vec<f64>) {
    assert_eq!(z.len(), z_ref.len());
    if z.is_empty() {
        return (0.0, Vec::new());
    }
    let n = z.len() as f64;
    let mut loss = 0.0;
    let grad = z
        .iter()
        .zip(z_ref)
        .map(|(a, b)| {
            loss += (a - b) * (a - b);
            2.0 * (a - b) / n
        })
        .collect();
    (loss / n, grad)
}

/// `1{m_a} |z_m - sg(z_a)|^2 + 1{m_m} |sg(z_m) - z_a|^2`, averaged over the
/// pixels where either mask is set. `a` is the gradient on `z_m`, `b` on
/// `z_a`.
pub fn mutual_depth_sg(
    z_m: &[f64],
    z_m_sg: &[f64],
    z_a: &[f64],
    z_a_sg: &[f64],
    m_a: &[bool],
    m_m: &[bool],
) -> (f64, PairGrad) {
    let n = z_m.len();
    let mut g = PairGrad { a: vec![0.0; n], b: vec![0.0; n] };
    let count = (0..n).filter(|&i| m_a[i] || m_m[i]).count();
    if count == 0 {
        return (0.0, g);
    }
    let inv = 1.0 / count as f64;
    let mut loss = 0.0;
    for i in 0..n {
        if m_a[i] {
            let d = z_m[i] - z_a_sg[i];
            loss += d * d;
            g.a[i] = 2.0 * d * inv;
        }
        if m_m[i] {
            let d = z_m_sg[i] - z_a[i];
            loss += d * d;
            g.b[i] = -2.0 * d * inv;
        }
    }
    (loss * inv, g)
}

/// Depth supervision between the main and augmented models.
pub fn aug(z_m: &[f64], z_a: &[f64], m_a: &[bool], m_m: &[bool]) -> (f64, PairGrad) {
    mutual_depth_sg(z_m, z_m, z_a, z_a, m_a, m_m)
}

/// Coarse-fine consistency: `m_f` marks where the fine depth is trusted to
/// supervise the coarse one and `m_c` the reverse. `a` is the gradient on
/// `z_c`, `b` on `z_f`.
pub fn coarse_fine(z_c: &[f64], z_f: &[f64], m_c: &[bool], m_f: &[bool]) -> (f64, PairGrad) {
    mutual_depth_sg(z_c, z_c, z_f, z_f, m_f, m_c)
}

/// Entropy of the weight mass gathered into `n_mc` contiguous groups,
/// renormalized by the total mass. Rays with almost no mass contribute zero.
pub fn mass_concentration(w: &[f64], n_mc: usize) -> Result<(f64, Vec<f64>)> {
    if n_mc == 0 || w.len() % n_mc != 0 {
        return Err(Error::Shape(format!("{} samples cannot form {n_mc} equal groups", w.len())));
    }
    let per = w.len() / n_mc;
    let groups: Vec<f64> = w.chunks(per).map(|c| c.iter().sum()).collect();
    let total: f64 = groups.iter().sum();
    let mut grad = vec![0.0; w.len()];
    if total < 1e-6 {
        return Ok((0.0, grad));
    }
    let p: Vec<f64> = groups.iter().map(|g| g / total).collect();
    let h: f64 = -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>();
    for (j, chunk) in grad.chunks_mut(per).enumerate() {
        // d H / d G_j = -(ln p_j + H) / S
        let gj = -(p[j].max(1e-300).ln() + h) / total;
        chunk.iter_mut().for_each(|v| *v = gj);
    }
    Ok((h, grad))
}

/// Squared distance between two expected canonical points; gradients for
/// both.
pub fn sparse_flow(a: &[f64; 3], b: &[f64; 3]) -> (f64, [f64; 3], [f64; 3]) {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    let loss = d.iter().map(|v| v * v).sum();
    (loss, d.map(|v| 2.0 * v), d.map(|v| -2.0 * v))
}

/// Masked L1 plus SSIM objective between two plane stacks, averaged over
/// planes. `o` holds one single-channel 0/1 mask per plane. Returns the
/// gradient with respect to `pred`.
pub fn mpi_photometric(target: &[Image], pred: &[Image], o: &[Image], beta: f64) -> (f64, Vec<Image>) {
    assert!(target.len() == pred.len() && pred.len() == o.len());
    let p = SsimParams::default();
    let z = target.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(pred.len());
    for ((m, mh), mask) in target.iter().zip(pred).zip(o) {
        let (w, h, ch) = (m.width, m.height, m.channels);
        let n = (w * h * ch) as f64;
        let mut g = Image::new(w, h, ch);
        let mut l1 = 0.0;
        for i in 0..w * h {
            let oi = mask.data[i];
            for c in 0..ch {
                let k = i * ch + c;
                let d = (m.data[k] - mh.data[k]) * oi;
                l1 += d.abs();
                g.data[k] = if d == 0.0 { 0.0 } else { -beta * d.signum() * oi / (n * z) };
            }
        }
        let mut ssim_sum = 0.0;
        for c in 0..ch {
            let x: Vec<f64> = (0..w * h).map(|i| m.data[i * ch + c] * mask.data[i]).collect();
            let y: Vec<f64> = (0..w * h).map(|i| mh.data[i * ch + c] * mask.data[i]).collect();
            let (s, gs) = ssim_plane(&x, &y, w, h, &p, true);
            ssim_sum += s;
            let gs = gs.expect("gradient requested");
            let scale = -(1.0 - beta) / (2.0 * ch as f64 * z);
            for i in 0..w * h {
                g.data[i * ch + c] += scale * gs[i] * mask.data[i];
            }
        }
        let ssim_mean = ssim_sum / ch as f64;
        loss += beta * l1 / n + (1.0 - beta) * (1.0 - ssim_mean) / 2.0;
        grads.push(g);
    }
    (loss / z, grads)
}

/// Edge-aware flow smoothness over plane stacks: forward differences in x
/// and y of `flow` (any channel count, L1 over channels), damped by
/// `exp(-a |grad c|)` (mean over color channels) and by `1 - |grad alpha|`,
/// averaged over locations with `alpha = 1`. Returns the gradient with
/// respect to `flow`.
pub fn flow_smoothness(flow: &[Image], color: &[Image], alpha: &[Image], a: f64) -> (f64, Vec<Image>) {
    let mut loss = 0.0;
    let mut count = 0usize;
    let mut grads: Vec<Image> = flow.iter().map(|f| Image::new(f.width, f.height, f.channels)).collect();
    let mut terms: Vec<(usize, usize, usize, f64)> = Vec::new();
    for (zi, ((u, c), al)) in flow.iter().zip(color).zip(alpha).enumerate() {
        let (w, h) = (u.width, u.height);
        for y in 0..h {
            for x in 0..w {
                if al.get(x, y, 0) != 1.0 {
                    continue;
                }
                count += 1;
                for (nx, ny) in [(x + 1, y), (x, y + 1)] {
                    if nx >= w || ny >= h {
                        continue;
                    }
                    let da = (al.get(nx, ny, 0) - al.get(x, y, 0)).abs();
                    let dc = (0..c.channels).map(|k| (c.get(nx, ny, k) - c.get(x, y, k)).abs()).sum::<f64>()
                        / c.channels as f64;
                    let wgt = (1.0 - da) * (-a * dc).exp();
                    if wgt == 0.0 {
                        continue;
                    }
                    let i0 = u.index(x, y);
                    let i1 = u.index(nx, ny);
                    for k in 0..u.channels {
                        let d = u.data[i1 + k] - u.data[i0 + k];
                        loss += wgt * d.abs();
                        if d != 0.0 {
                            terms.push((zi, i1 + k, i0 + k, wgt * d.signum()));
                        }
                    }
                }
            }
        }
    }
    if count == 0 {
        return (0.0, grads);
    }
    let inv = 1.0 / count as f64;
    for (zi, i1, i0, g) in terms {
        grads[zi].data[i1] += g * inv;
        grads[zi].data[i0] -= g * inv;
    }
    (loss * inv, grads)
}

/// Loss weights and schedules for every objective. Warmups are fractions of
/// the total iteration budget before which the term stays off.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Photometric loss of the main model.
    pub photometric: f64,
    /// Photometric loss of the augmented model.
    pub photometric_aug: f64,
    pub sparse_depth: f64,
    pub vip: f64,
    pub visibility: f64,
    pub aug: f64,
    pub coarse_fine: f64,
    pub mass_concentration: f64,
    pub sparse_flow: f64,
    /// L1 share of the plane photometric loss.
    pub mpi_beta: f64,
    /// Edge sensitivity of the smoothness weight.
    pub smooth_a: f64,
    pub smooth: f64,
    pub vip_warmup: f64,
    pub aug_warmup: f64,
    pub coarse_fine_warmup: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            photometric: 1.0,
            photometric_aug: 0.0,
            sparse_depth: 0.0,
            vip: 0.0,
            visibility: 0.0,
            aug: 0.0,
            coarse_fine: 0.0,
            mass_concentration: 0.0,
            sparse_flow: 0.0,
            mpi_beta: 0.15,
            smooth_a: 10.0,
            smooth: 10.0,
            vip_warmup: 0.0,
            aug_warmup: 0.0,
            coarse_fine_warmup: 0.0,
        }
    }
}

impl LossWeights {
    /// Visibility-prior regularized field.
    pub fn vip_nerf() -> Self {
        Self { sparse_depth: 0.1, vip: 0.001, visibility: 0.1, vip_warmup: 0.4, ..Self::default() }
    }

    /// Positional-encoding field with a smoothing/Lambertian companion.
    pub fn simple_nerf() -> Self {
        Self {
            photometric_aug: 1.0,
            sparse_depth: 0.1,
            aug: 0.1,
            coarse_fine: 0.1,
            aug_warmup: 0.1,
            coarse_fine_warmup: 0.1,
            ..Self::default()
        }
    }

    pub fn simple_tensorf() -> Self {
        Self {
            photometric_aug: 1.0,
            sparse_depth: 0.1,
            aug: 0.1,
            mass_concentration: 0.01,
            aug_warmup: 0.2,
            ..Self::default()
        }
    }

    pub fn simple_zipnerf() -> Self {
        Self { photometric_aug: 1.0, aug: 10.0, aug_warmup: 0.2, ..Self::default() }
    }

    pub fn sparse_flow_derf() -> Self {
        Self { sparse_flow: 1.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.photometric,
            self.photometric_aug,
            self.sparse_depth,
            self.vip,
            self.visibility,
            self.aug,
            self.coarse_fine,
            self.mass_concentration,
            self.sparse_flow,
            self.mpi_beta,
            self.smooth_a,
            self.smooth,
            self.vip_warmup,
            self.aug_warmup,
            self.coarse_fine_warmup,
        ];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Weights in effect at `iter` of `total` iterations.
    pub fn active(&self, iter: usize, total: usize) -> LossWeights {
        let frac = if total == 0 { 1.0 } else { iter as f64 / total as f64 };
        let gate = |w: f64, start: f64| if frac >= start { w } else { 0.0 };
        LossWeights {
            vip: gate(self.vip, self.vip_warmup),
            aug: gate(self.aug, self.aug_warmup),
            coarse_fine: gate(self.coarse_fine, self.coarse_fine_warmup),
            ..self.clone()
        }
    }
}

/// Values of the individual terms for one batch; absent terms are zero.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub photometric: f64,
    pub photometric_aug: f64,
    pub sparse_depth: f64,
    pub vip: f64,
    pub visibility: f64,
    pub aug: f64,
    pub coarse_fine: f64,
    pub mass_concentration: f64,
    pub sparse_flow: f64,
}

/// Weighted sum of the terms active at `iter` of `total`.
pub fn total_loss(t: &LossTerms, w: &LossWeights, iter: usize, total: usize) -> f64 {
    let a = w.active(iter, total);
    a.photometric * t.photometric
        + a.photometric_aug * t.photometric_aug
        + a.sparse_depth * t.sparse_depth
        + a.vip * t.vip
        + a.visibility * t.visibility
        + a.aug * t.aug
        + a.coarse_fine * t.coarse_fine
        + a.mass_concentration * t.mass_concentration
        + a.sparse_flow * t.sparse_flow
}

/// Plane-stack objective: masked photometric term plus weighted smoothness.
pub fn mpi_flow_objective(
    target: &[Image],
    pred: &[Image],
    o: &[Image],
    flow: &[Image],
    color: &[Image],
    alpha: &[Image],
    w: &LossWeights,
) -> f64 {
    mpi_photometric(target, pred, o, w.mpi_beta).0 + w.smooth * flow_smoothness(flow, color, alpha, w.smooth_a).0
}
