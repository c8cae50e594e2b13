//! Analytic adjoints against central finite differences for every loss and
//! every field family, run end to end through the ray renderer.

use std::fmt::Write as _;

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::fields::{Aabb, BlockKind, DecoderConfig, FieldConfig, HexPlaneField, ModelConfig, RadianceModel};
use crate::geometry::Camera;
use crate::image::Image;
use crate::losses;
use crate::render::{backward_ray, sample_ray, trace_ray, RayGrad, RayTime, RayTrace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Largest accepted relative error.
    pub tolerance: f64,
    pub seed: u64,
    /// Parameter entries probed per block.
    pub entries_per_block: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self { step: 1e-5, tolerance: 1e-4, seed: 0, entries_per_block: 60 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub checked: usize,
    /// Entries whose difference stencil straddles a kink.
    pub skipped: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub checks: Vec<Check>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:<36} {:>7} {:>7} {:>12}  result\n", "check", "entries", "kinks", "max rel err");
        for c in &self.checks {
            let _ = writeln!(
                s,
                "{:<36} {:>7} {:>7} {:>12.3e}  {}",
                c.name,
                c.checked,
                c.skipped,
                c.max_rel_err,
                if c.passed { "pass" } else { "FAIL" }
            );
        }
        s
    }
}

/// Relative error with a floor: entries smaller than `floor` are judged by
/// their absolute error against it.
pub fn rel_err(fd: f64, an: f64, floor: f64) -> f64 {
    (fd - an).abs() / fd.abs().max(an.abs()).max(floor)
}

/// Smallest gradient magnitude a central difference of a loss of size
/// `loss` resolves to relative accuracy `tol` in double precision.
pub fn resolution_floor(loss: f64, step: f64, tol: f64) -> f64 {
    let roundoff = 1e2 * f64::EPSILON * loss.abs().max(1.0) / step;
    (roundoff / tol).max(1e-6)
}

struct Probe {
    step: f64,
    tol: f64,
    floor: f64,
    checked: usize,
    skipped: usize,
    worst: f64,
}

impl Probe {
    fn new(cfg: &GradcheckConfig) -> Self {
        Self { step: cfg.step, tol: cfg.tolerance, floor: 1e-6, checked: 0, skipped: 0, worst: 0.0 }
    }

    fn for_loss(cfg: &GradcheckConfig, loss: f64) -> Self {
        Self { floor: resolution_floor(loss, cfg.step, cfg.tolerance), ..Self::new(cfg) }
    }

    /// Compares `grad[i]` with the central difference of `f` in `x[i]`.
    fn vector(&mut self, x: &[f64], grad: &[f64], f: impl Fn(&[f64]) -> f64) {
        for i in 0..x.len() {
            let mut p = x.to_vec();
            p[i] += self.step;
            let mut m = x.to_vec();
            m[i] -= self.step;
            let fd = (f(&p) - f(&m)) / (2.0 * self.step);
            self.record(fd, grad[i]);
        }
    }

    /// Records a three-point stencil `f(x - h), f(x), f(x + h)`, skipping it
    /// when the one-sided slopes disagree the way they only do across a
    /// ReLU kink or a box boundary.
    fn stencil(&mut self, minus: f64, mid: f64, plus: f64, an: f64) {
        let (l, r) = (mid - minus, plus - mid);
        if (r - l).abs() > 2e-3 * (l.abs() + r.abs()) + self.floor * self.tol * self.step {
            self.skipped += 1;
            return;
        }
        self.record((plus - minus) / (2.0 * self.step), an);
    }

    fn record(&mut self, fd: f64, an: f64) {
        self.checked += 1;
        self.worst = self.worst.max(rel_err(fd, an, self.floor));
    }

    fn finish(self, name: &str) -> Check {
        let passed = self.checked > 0 && self.worst < self.tol && self.skipped <= self.checked;
        Check { name: name.into(), checked: self.checked, skipped: self.skipped, max_rel_err: self.worst, passed }
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn wave_planes(seed: u64, z: usize, w: usize, h: usize, ch: usize) -> Vec<Image> {
    (0..z)
        .map(|k| {
            Image::from_fn(w, h, ch, |x, y, c| {
                let s = (seed as f64 + 1.0) * 0.37 + k as f64 * 1.3 + c as f64 * 0.7;
                0.5 + 0.4 * ((x as f64 * 0.9 + s).sin() * (y as f64 * 0.6 + 2.0 * s).cos())
            })
        })
        .collect()
}

fn loss_checks(cfg: &GradcheckConfig, rng: &mut ChaCha8Rng) -> Vec<Check> {
    let mut out = Vec::new();

    let pred = uniform(rng, 12, 0.0, 1.0);
    let gt = uniform(rng, 12, 0.0, 1.0);
    let as_rgb = |v: &[f64]| v.chunks(3).map(|c| [c[0], c[1], c[2]]).collect::<Vec<_>>();
    let (_, g) = losses::photometric(&as_rgb(&pred), &as_rgb(&gt));
    let mut p = Probe::new(cfg);
    p.vector(&pred, &g.concat(), |x| losses::photometric(&as_rgb(x), &as_rgb(&gt)).0);
    out.push(p.finish("loss/photometric"));

    // keep t' off the hinge
    let tau = [true, false, true, true, false, true];
    let t = uniform(rng, 6, 0.05, 0.9);
    let (_, g) = losses::vip(&tau, &t);
    let mut p = Probe::new(cfg);
    p.vector(&t, &g, |x| losses::vip(&tau, x).0);
    out.push(p.finish("loss/visibility_prior"));

    let tt = uniform(rng, 8, 0.0, 1.0);
    let th = uniform(rng, 8, 0.0, 1.0);
    let (_, g) = losses::visibility_consistency(&tt, &th);
    let mut p = Probe::new(cfg);
    // each live copy sees its own half of the objective
    p.vector(&tt, &g.a, |x| losses::visibility_consistency_sg(x, &tt, &th, &th).0);
    p.vector(&th, &g.b, |x| losses::visibility_consistency_sg(&tt, &tt, x, &th).0);
    out.push(p.finish("loss/visibility_consistency"));

    let z = uniform(rng, 5, 1.0, 5.0);
    let zr = uniform(rng, 5, 1.0, 5.0);
    let (_, g) = losses::sparse_depth(&z, &zr);
    let mut p = Probe::new(cfg);
    p.vector(&z, &g, |x| losses::sparse_depth(x, &zr).0);
    out.push(p.finish("loss/sparse_depth"));

    let zm = uniform(rng, 6, 1.0, 5.0);
    let za = uniform(rng, 6, 1.0, 5.0);
    let ma = [true, true, false, true, false, false];
    let mm = [false, true, true, false, false, true];
    for (name, f) in [
        ("loss/augmented_depth", losses::aug as fn(&[f64], &[f64], &[bool], &[bool]) -> (f64, losses::PairGrad)),
        ("loss/coarse_fine", losses::coarse_fine),
    ] {
        let (_, g) = f(&zm, &za, &ma, &mm);
        let mut p = Probe::new(cfg);
        // the stopped copies are held fixed
        let (m1, m2) = if name == "loss/coarse_fine" { (mm, ma) } else { (ma, mm) };
        p.vector(&zm, &g.a, |x| losses::mutual_depth_sg(x, &zm, &za, &za, &m1, &m2).0);
        p.vector(&za, &g.b, |x| losses::mutual_depth_sg(&zm, &zm, x, &za, &m1, &m2).0);
        out.push(p.finish(name));
    }

    let w = uniform(rng, 20, 0.0, 0.2);
    let (_, g) = losses::mass_concentration(&w, 5).expect("divisible");
    let mut p = Probe::new(cfg);
    p.vector(&w, &g, |x| losses::mass_concentration(x, 5).expect("divisible").0);
    out.push(p.finish("loss/mass_concentration"));

    let a: Vec<f64> = uniform(rng, 3, -1.0, 1.0);
    let b: Vec<f64> = uniform(rng, 3, -1.0, 1.0);
    let arr = |v: &[f64]| [v[0], v[1], v[2]];
    let (_, ga, gb) = losses::sparse_flow(&arr(&a), &arr(&b));
    let mut p = Probe::new(cfg);
    p.vector(&a, &ga, |x| losses::sparse_flow(&arr(x), &arr(&b)).0);
    p.vector(&b, &gb, |x| losses::sparse_flow(&arr(&a), &arr(x)).0);
    out.push(p.finish("loss/sparse_flow"));

    let target = wave_planes(cfg.seed + 1, 2, 12, 11, 3);
    let pred = wave_planes(cfg.seed + 2, 2, 12, 11, 3);
    let o: Vec<Image> = (0..2).map(|k| Image::from_fn(12, 11, 1, |x, y, _| ((x + y + k) % 5 != 0) as u8 as f64)).collect();
    let (_, g) = losses::mpi_photometric(&target, &pred, &o, 0.15);
    let mut p = Probe::new(cfg);
    for zi in 0..2 {
        let flat = pred[zi].data.clone();
        let idx: Vec<usize> = (0..flat.len()).step_by(7).collect();
        for &k in &idx {
            let f = |v: f64| {
                let mut q = pred.clone();
                q[zi].data[k] = v;
                losses::mpi_photometric(&target, &q, &o, 0.15).0
            };
            let fd = (f(flat[k] + cfg.step) - f(flat[k] - cfg.step)) / (2.0 * cfg.step);
            p.record(fd, g[zi].data[k]);
        }
    }
    out.push(p.finish("loss/plane_photometric"));

    let flow = wave_planes(cfg.seed + 4, 2, 7, 6, 3);
    let color = wave_planes(cfg.seed + 5, 2, 7, 6, 3);
    let alpha: Vec<Image> = (0..2).map(|k| Image::from_fn(7, 6, 1, |x, y, _| ((x * 3 + y + k) % 4 != 0) as u8 as f64)).collect();
    let (_, g) = losses::flow_smoothness(&flow, &color, &alpha, 10.0);
    let mut p = Probe::new(cfg);
    for zi in 0..2 {
        for k in 0..flow[zi].data.len() {
            let f = |v: f64| {
                let mut q = flow.clone();
                q[zi].data[k] = v;
                losses::flow_smoothness(&q, &color, &alpha, 10.0).0
            };
            let x = flow[zi].data[k];
            let fd = (f(x + cfg.step) - f(x - cfg.step)) / (2.0 * cfg.step);
            p.record(fd, g[zi].data[k]);
        }
    }
    out.push(p.finish("loss/flow_smoothness"));

    out.push(stop_gradient_check(&zm, &za));
    out
}

/// Stopped branches carry no adjoint even though the loss depends on them.
fn stop_gradient_check(zm: &[f64], za: &[f64]) -> Check {
    let n = zm.len();
    let on = vec![true; n];
    let off = vec![false; n];
    // only the main model is supervised: z_a enters through its stopped copy
    let (_, g) = losses::mutual_depth_sg(zm, zm, za, za, &on, &off);
    let h = 1e-5;
    let mut shifted = za.to_vec();
    shifted[0] += h;
    let dep = (losses::mutual_depth_sg(zm, zm, za, &shifted, &on, &off).0 - losses::mutual_depth_sg(zm, zm, za, za, &on, &off).0).abs();
    let (_, gv) = losses::visibility_consistency_sg(zm, zm, za, zm);
    let zero = g.b.iter().all(|&v| v == 0.0) && gv.b.iter().zip(zm.iter().zip(za)).all(|(&b, (m, a))| b == -2.0 * (m - a));
    Check { name: "stop_gradient/exact_zero".into(), checked: 2 * n, skipped: 0, max_rel_err: 0.0, passed: zero && dep > 0.0 }
}

fn test_bbox() -> Aabb {
    Aabb::new([-1.0, -0.8, 2.0], [1.0, 0.8, 5.0]).expect("valid box")
}

pub fn families() -> Vec<FieldConfig> {
    vec![
        FieldConfig::Voxel { resolution: [4, 5, 3], feature_dim: 4 },
        FieldConfig::Tensor { resolution: [5, 4, 6], rank_density: 2, rank_color: 2, feature_dim: 4, sigma_max: 20.0 },
        FieldConfig::Hash {
            levels: 3,
            features_per_level: 2,
            log2_table: 6,
            base_resolution: 2,
            max_resolution: 8,
            s_near: 0.0,
            feature_dim: 4,
        },
        FieldConfig::Encoded { degrees: 3, feature_dim: 4 },
    ]
}

fn model_for(field: FieldConfig, time: bool, rng: &mut ChaCha8Rng) -> RadianceModel {
    let cfg = ModelConfig {
        bbox: test_bbox(),
        field,
        decoder: DecoderConfig { visibility_head: true, view_degrees: 2, time_conditioned: time, time_degrees: 2, ..Default::default() },
        density_shift: -0.3,
        hidden: 16,
    };
    let mut m = RadianceModel::new(cfg, rng).expect("valid model");
    let kinds: Vec<BlockKind> = m.blocks().iter().map(|b| b.1).collect();
    // grid entries spread over [-1, 1] keep network units off their kinks
    for (b, k) in m.blocks_mut().into_iter().zip(kinds) {
        if k == BlockKind::Grid {
            b.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        }
    }
    m
}

/// Rays of the objective with their supervision targets.
struct Setup {
    cams: (Camera, Camera),
    pixels: Vec<Vector2<f64>>,
    times: Vec<RayTime>,
    color: Vec<[f64; 3]>,
    depth: Vec<f64>,
    tau: Vec<bool>,
}

fn setup(rng: &mut ChaCha8Rng) -> Setup {
    let primary = Camera::looking_forward(20.0, 16, 12, Vector3::zeros());
    let secondary = Camera::looking_forward(20.0, 16, 12, Vector3::new(0.4, 0.0, 0.0));
    // every sample stays inside the box, so moved points never cross its
    // boundary, where density is discontinuous
    let pixels = vec![Vector2::new(7.3, 5.6), Vector2::new(4.1, 8.2), Vector2::new(10.2, 3.4)];
    let times = vec![
        RayTime { frame: 1.3, normalized: 0.2 },
        RayTime { frame: 4.0, normalized: 0.5 },
        RayTime { frame: 6.6, normalized: 0.8 },
    ];
    Setup {
        cams: (primary, secondary),
        color: (0..3).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect(),
        depth: uniform(rng, 3, 2.5, 4.5),
        tau: vec![true, false, true],
        pixels,
        times,
    }
}

const SAMPLES: usize = 24;
const NEAR: f64 = 2.2;
const FAR: f64 = 4.8;
const GROUPS: usize = 4;

/// Ray-level objectives exercised through the renderer.
pub const RAY_TERMS: [&str; 8] =
    ["photometric", "sparse_depth", "visibility_prior", "visibility_consistency", "mass_concentration", "augmented_depth", "coarse_fine", "sparse_flow"];

/// Values behind stop-gradients, frozen at the unperturbed parameters so the
/// finite differences see the same surrogate the adjoint differentiates.
#[derive(Clone)]
struct Frozen {
    transmittance: Vec<Vec<f64>>,
    vis: Vec<Vec<f64>>,
    depths: Vec<f64>,
}

/// One ray-level loss, with the per-ray upstream gradients when `want` is
/// set.
fn objective(
    model: &RadianceModel,
    motion: Option<&HexPlaneField>,
    s: &Setup,
    term: &str,
    frozen: Option<&Frozen>,
    want: bool,
) -> (f64, Vec<RayTrace>, Vec<RayGrad>, Frozen) {
    let traces: Vec<RayTrace> = s
        .pixels
        .iter()
        .zip(&s.times)
        .map(|(px, &t)| {
            let ray = s.cams.0.ray(px);
            let samples = sample_ray(model, NEAR, FAR, SAMPLES, None);
            trace_ray(model, motion, &ray, samples, t, Some(&s.cams.1))
        })
        .collect();
    let n = traces.len();
    let mut g: Vec<RayGrad> = traces
        .iter()
        .map(|t| RayGrad {
            weights: vec![0.0; t.samples.len()],
            transmittance: vec![0.0; t.samples.len()],
            vis: vec![0.0; t.samples.len()],
            ..Default::default()
        })
        .collect();
    let r = |i: usize| &traces[i].result;
    let mut total = 0.0;

    let depths: Vec<f64> = (0..n).map(|i| r(i).depth).collect();
    let live = Frozen {
        transmittance: (0..n).map(|i| r(i).transmittance.clone()).collect(),
        vis: (0..n).map(|i| r(i).vis.clone().expect("head present")).collect(),
        depths: depths.clone(),
    };
    let fz = frozen.unwrap_or(&live);
    // neighboring rays stand in for the companion model and the fine level
    let (za, zb) = ([depths[0], depths[1]], [depths[1], depths[2]]);
    let (za_sg, zb_sg) = ([fz.depths[0], fz.depths[1]], [fz.depths[1], fz.depths[2]]);
    match term {
        "photometric" => {
            let colors: Vec<[f64; 3]> = (0..n).map(|i| r(i).color).collect();
            let (l, gc) = losses::photometric(&colors, &s.color);
            total += l;
            for i in 0..n {
                g[i].color = gc[i];
            }
        }
        "sparse_depth" => {
            let (l, gd) = losses::sparse_depth(&depths, &s.depth);
            total += l;
            for i in 0..n {
                g[i].depth += gd[i];
            }
        }
        "visibility_prior" => {
            let tp: Vec<f64> = (0..n).map(|i| r(i).t_prime.expect("secondary given")).collect();
            let (l, gv) = losses::vip(&s.tau, &tp);
            total += l;
            for i in 0..n {
                g[i].t_prime += gv[i];
            }
        }
        "visibility_consistency" => {
            for i in 0..n {
                let (l, gp) = losses::visibility_consistency_sg(
                    &live.transmittance[i],
                    &fz.transmittance[i],
                    &live.vis[i],
                    &fz.vis[i],
                );
                total += l;
                for k in 0..SAMPLES {
                    g[i].transmittance[k] += gp.a[k];
                    g[i].vis[k] += gp.b[k];
                }
            }
        }
        "mass_concentration" => {
            for i in 0..n {
                let (l, gm) = losses::mass_concentration(&r(i).weights, GROUPS).expect("divisible");
                total += l;
                for k in 0..SAMPLES {
                    g[i].weights[k] += gm[k];
                }
            }
        }
        "augmented_depth" | "coarse_fine" => {
            // the coarse-fine masks swap roles, as in the loss itself
            let (m1, m2) = if term == "augmented_depth" { ([true, true], [false, true]) } else { ([true, true], [true, false]) };
            let (l, gp) = losses::mutual_depth_sg(&za, &za_sg, &zb, &zb_sg, &m1, &m2);
            total += l;
            for (k, (i, j)) in [(0, 1), (1, 2)].into_iter().enumerate() {
                g[i].depth += gp.a[k];
                g[j].depth += gp.b[k];
            }
        }
        "sparse_flow" => {
            let (l, gp, gq) = losses::sparse_flow(&r(0).canonical_point, &r(2).canonical_point);
            total += l;
            for c in 0..3 {
                g[0].canonical_point[c] += gp[c];
                g[2].canonical_point[c] += gq[c];
            }
        }
        _ => unreachable!("unknown term {term}"),
    }
    if !want {
        g.clear();
    }
    (total, traces, g, live)
}

/// Indices probed in a block: every nonzero analytic entry first, then a
/// stride over the rest, capped.
fn probe_indices(grad: &[f64], cap: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..grad.len()).filter(|&i| grad[i] != 0.0).collect();
    idx.extend((0..grad.len()).filter(|&i| grad[i] == 0.0 && i % 17 == 0));
    idx.truncate(cap);
    idx
}

fn field_check(cfg: &GradcheckConfig, fc: FieldConfig, dynamic: bool, term: &str, rng: &mut ChaCha8Rng) -> Check {
    let fam = fc.family();
    let model = model_for(fc, dynamic, rng);
    let motion = dynamic.then(|| {
        let mut m = HexPlaneField::new(test_bbox(), vec![3, 5], 4, 3, 9, 8, rng).expect("valid motion field");
        m.decoder = crate::fields::Mlp::init(3, 8, 3, rng);
        m.planes.iter_mut().for_each(|v| *v += rng.gen_range(-0.3..0.3));
        m
    });
    let s = setup(rng);
    let (loss, traces, rg, frozen) = objective(&model, motion.as_ref(), &s, term, None, true);
    let mut grads = model.zero_grads();
    let mut mgrads = motion.as_ref().map(|m| vec![vec![0.0; m.planes.len()], vec![0.0; m.decoder.params.len()]]);
    for (t, g) in traces.iter().zip(&rg) {
        backward_ray(&model, motion.as_ref(), t, g, &mut grads, mgrads.as_deref_mut());
    }
    let mut p = Probe::for_loss(cfg, loss);
    let h = cfg.step;
    for b in 0..grads.0.len() {
        for i in probe_indices(&grads.0[b], cfg.entries_per_block) {
            let eval = |d: f64| {
                let mut m = model.clone();
                m.blocks_mut()[b][i] += d;
                objective(&m, motion.as_ref(), &s, term, Some(&frozen), false).0
            };
            p.stencil(eval(-h), loss, eval(h), grads.0[b][i]);
        }
    }
    if let (Some(m0), Some(mg)) = (&motion, &mgrads) {
        for (b, gb) in mg.iter().enumerate() {
            for i in probe_indices(gb, cfg.entries_per_block) {
                let eval = |d: f64| {
                    let mut m = m0.clone();
                    if b == 0 {
                        m.planes[i] += d;
                    } else {
                        m.decoder.params[i] += d;
                    }
                    objective(&model, Some(&m), &s, term, Some(&frozen), false).0
                };
                p.stencil(eval(-h), loss, eval(h), gb[i]);
            }
        }
    }
    let name = if dynamic { format!("{fam}+motion/{term}") } else { format!("{fam}/{term}") };
    p.finish(&name)
}

/// Runs every check.
pub fn run(cfg: &GradcheckConfig) -> Report {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut checks = loss_checks(cfg, &mut rng);
    for fc in families() {
        for term in &RAY_TERMS[..RAY_TERMS.len() - 1] {
            checks.push(field_check(cfg, fc.clone(), false, term, &mut rng));
        }
    }
    for term in RAY_TERMS {
        checks.push(field_check(cfg, families()[0].clone(), true, term, &mut rng));
    }
    Report { checks }
}
