//! Training loop for static scenes.

use nalgebra::Vector2;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{format_log, Adam, LogEntry, LrConfig};
use crate::error::{Error, Result};
use crate::eval::psnr_from_mse;
use crate::fields::{augment_config, AugmentKind, AugmentSettings, Grads, ModelConfig, RadianceModel};
use crate::geometry::Camera;
use crate::image::{sample_bilinear_into, Image, Mask};
use crate::losses::{self, LossTerms, LossWeights};
use crate::priors::sparse::SparseDepthPoint;
use crate::priors::{build_psv, nearest_view, reliability_at, visibility_prior, View};
use crate::render::{backward_ray, hierarchical_resample, sample_ray, trace_ray, RayGrad, RayTime, RayTrace};
use crate::scenes::io::Dataset;

/// Rays per parallel work unit; fixed so reductions do not depend on the
/// thread count.
const CHUNK: usize = 16;

#[derive(Debug, Clone)]
pub struct TrainView {
    pub camera: Camera,
    pub image: Image,
}

/// Visibility prior of `primary` with respect to `secondary`.
#[derive(Debug, Clone)]
pub struct PairPrior {
    pub primary: usize,
    pub secondary: usize,
    pub visible: Mask,
}

#[derive(Debug, Clone)]
pub struct StaticData {
    pub views: Vec<TrainView>,
    pub near: f64,
    pub far: f64,
    /// Keypoint depths; `view` indexes `views`.
    pub sparse_depth: Vec<SparseDepthPoint>,
    pub priors: Vec<PairPrior>,
}

impl StaticData {
    /// Training views `views` of frame `frame`.
    pub fn from_dataset(ds: &Dataset, views: &[usize], frame: usize) -> Result<Self> {
        let mut out = Vec::with_capacity(views.len());
        for &v in views {
            if v >= ds.views() || frame >= ds.frames() {
                return Err(Error::Config(format!("view {v} / frame {frame} not in dataset")));
            }
            out.push(TrainView { camera: ds.cameras[v][frame].clone(), image: ds.rgb[v][frame].clone() });
        }
        let sparse_depth = ds
            .sparse_depth
            .iter()
            .filter(|p| p.t == frame)
            .filter_map(|p| views.iter().position(|&v| v == p.view).map(|i| SparseDepthPoint { view: i, ..*p }))
            .collect();
        Ok(Self { views: out, near: ds.z_near, far: ds.z_far, sparse_depth, priors: Vec::new() })
    }

    /// Plane-sweep visibility priors for every ordered pair of views.
    pub fn build_priors(&mut self, planes: usize, gamma: f64) {
        self.priors.clear();
        for i in 0..self.views.len() {
            for j in 0..self.views.len() {
                if i == j {
                    continue;
                }
                let a = View { camera: &self.views[i].camera, image: &self.views[i].image };
                let b = View { camera: &self.views[j].camera, image: &self.views[j].image };
                let psv = build_psv(a, b, planes, self.near, self.far);
                let prior = visibility_prior(&psv, gamma);
                self.priors.push(PairPrior { primary: i, secondary: j, visible: prior.visible });
            }
        }
    }

    fn view(&self, i: usize) -> View<'_> {
        View { camera: &self.views[i].camera, image: &self.views[i].image }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StaticFitConfig {
    pub iters: usize,
    /// Photometric rays per iteration.
    pub batch: usize,
    pub samples: usize,
    /// Extra samples of a fine model; zero disables it.
    pub fine_samples: usize,
    /// Keypoint rays per iteration.
    pub depth_batch: usize,
    pub seed: u64,
    pub lr: LrConfig,
    pub weights: LossWeights,
    /// Augmented companions, each built by composing the listed reductions.
    pub augmented: Vec<Vec<AugmentKind>>,
    pub augment_settings: AugmentSettings,
    pub patch: usize,
    pub e_tau: f64,
    pub n_mc: usize,
    pub log_every: usize,
}

impl Default for StaticFitConfig {
    fn default() -> Self {
        Self {
            iters: 25_000,
            batch: 1024,
            samples: 32,
            fine_samples: 0,
            depth_batch: 32,
            seed: 0,
            lr: LrConfig::default(),
            weights: LossWeights::default(),
            augmented: Vec::new(),
            augment_settings: AugmentSettings::default(),
            patch: crate::priors::DEFAULT_PATCH,
            e_tau: crate::priors::DEFAULT_E_TAU,
            n_mc: 5,
            log_every: 10,
        }
    }
}

impl StaticFitConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        self.weights.validate()?;
        self.lr.validate()?;
        if self.iters == 0 || self.batch == 0 || self.samples < 2 {
            return Err(Error::Config("iters, batch and samples must be positive".into()));
        }
        if (self.weights.vip > 0.0 || self.weights.visibility > 0.0) && !model.decoder.visibility_head {
            return Err(Error::Config("visibility losses need a visibility head".into()));
        }
        if self.weights.mass_concentration > 0.0 && !self.augmented.is_empty() {
            let n = self.samples;
            if self.n_mc == 0 || n % self.n_mc != 0 {
                return Err(Error::Config(format!("{n} samples cannot form {} groups", self.n_mc)));
            }
        }
        if self.weights.coarse_fine > 0.0 && self.fine_samples == 0 {
            return Err(Error::Config("coarse-fine consistency needs fine samples".into()));
        }
        Ok(())
    }
}

/// Trained models and the training log.
#[derive(Debug, Clone)]
pub struct StaticFit {
    pub coarse: RadianceModel,
    pub fine: Option<RadianceModel>,
    pub augmented: Vec<RadianceModel>,
    pub log: Vec<LogEntry>,
    pub samples: usize,
    pub fine_samples: usize,
}

impl StaticFit {
    pub fn log_text(&self) -> String {
        format_log(&self.log)
    }

    /// Final model: the fine one when present.
    pub fn main(&self) -> &RadianceModel {
        self.fine.as_ref().unwrap_or(&self.coarse)
    }

    /// Color and depth of `camera` without jitter; the fine level resamples
    /// with a per-pixel seeded stream.
    pub fn render(&self, camera: &Camera, near: f64, far: f64) -> (Image, Image) {
        render_levels(&self.coarse, self.fine.as_ref(), camera, near, far, self.samples, self.fine_samples)
    }

    /// Same for augmented model `k`.
    pub fn render_augmented(&self, k: usize, camera: &Camera, near: f64, far: f64) -> (Image, Image) {
        render_levels(&self.augmented[k], None, camera, near, far, self.samples, 0)
    }
}

/// Color and depth image of a coarse model, optionally refined by a fine one.
pub fn render_levels(
    coarse: &RadianceModel,
    fine: Option<&RadianceModel>,
    camera: &Camera,
    near: f64,
    far: f64,
    samples: usize,
    fine_samples: usize,
) -> (Image, Image) {
    let (w, h) = (camera.width, camera.height);
    let rows: Vec<Vec<([f64; 3], f64)>> = (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .map(|x| {
                    let ray = camera.ray(&Vector2::new(x as f64, y as f64));
                    let s = sample_ray(coarse, near, far, samples, None);
                    let t = trace_ray(coarse, None, &ray, s, RayTime::default(), None);
                    match fine {
                        Some(f) => {
                            let mut rng = ChaCha8Rng::seed_from_u64((y * w + x) as u64);
                            let s = hierarchical_resample(&t.result.weights, &t.samples.depths, far, fine_samples, &mut rng);
                            let t = trace_ray(f, None, &ray, s, RayTime::default(), None);
                            (t.result.color, t.result.depth)
                        }
                        None => (t.result.color, t.result.depth),
                    }
                })
                .collect()
        })
        .collect();
    let mut rgb = Image::new(w, h, 3);
    let mut depth = Image::new(w, h, 1);
    for (y, row) in rows.into_iter().enumerate() {
        for (x, (c, z)) in row.into_iter().enumerate() {
            rgb.pixel_mut(x, y).copy_from_slice(&c);
            depth.set(x, y, 0, z);
        }
    }
    (rgb, depth)
}

/// One training ray: a pixel of a view, optionally paired with a secondary
/// view for the visibility prior, or a keypoint with a reference depth.
#[derive(Debug, Clone, Copy)]
struct RaySpec {
    view: usize,
    x: f64,
    y: f64,
    secondary: Option<usize>,
    tau: bool,
    depth_ref: Option<f64>,
    seed: u64,
}

struct RayState {
    coarse: RayTrace,
    fine: Option<RayTrace>,
    aug: Vec<RayTrace>,
    gt: [f64; 3],
}

struct Models {
    coarse: RadianceModel,
    fine: Option<RadianceModel>,
    aug: Vec<RadianceModel>,
}

impl Models {
    fn all(&self) -> Vec<&RadianceModel> {
        let mut v = vec![&self.coarse];
        v.extend(self.fine.iter());
        v.extend(self.aug.iter());
        v
    }

    fn all_mut(&mut self) -> Vec<&mut RadianceModel> {
        let mut v = vec![&mut self.coarse];
        v.extend(self.fine.iter_mut());
        v.extend(self.aug.iter_mut());
        v
    }
}

fn build_augmented(base: &ModelConfig, kinds: &[AugmentKind], s: &AugmentSettings) -> Result<ModelConfig> {
    let mut cfg = base.clone();
    for &k in kinds {
        cfg = augment_config(&cfg, k, s)?;
    }
    // companions never carry the visibility head
    cfg.decoder.visibility_head = false;
    Ok(cfg)
}

fn iter_rng(seed: u64, iter: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_a11);
    rng.set_stream(iter as u64 + 1);
    rng
}

pub fn fit_static(data: &StaticData, model: &ModelConfig, cfg: &StaticFitConfig) -> Result<StaticFit> {
    cfg.validate(model)?;
    if data.views.is_empty() {
        return Err(Error::Config("no training views".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let coarse = RadianceModel::new(model.clone(), &mut rng)?;
    let fine = if cfg.fine_samples > 0 { Some(RadianceModel::new(model.clone(), &mut rng)?) } else { None };
    let mut aug = Vec::new();
    for kinds in &cfg.augmented {
        aug.push(RadianceModel::new(build_augmented(model, kinds, &cfg.augment_settings)?, &mut rng)?);
    }
    let mut models = Models { coarse, fine, aug };

    let names: Vec<String> = {
        let mut n = Vec::new();
        for (m, tag) in models.all().iter().zip(model_tags(&models)) {
            n.extend(m.blocks().into_iter().map(|(b, _, _)| format!("{tag}.{b}")));
        }
        n
    };
    let kinds: Vec<_> = models.all().iter().flat_map(|m| m.blocks().into_iter().map(|(_, k, _)| k)).collect();
    let sizes: Vec<usize> = models.all().iter().flat_map(|m| m.blocks().into_iter().map(|(_, _, b)| b.len())).collect();
    let mut adam = Adam::new(&sizes);

    let cams: Vec<&Camera> = data.views.iter().map(|v| &v.camera).collect();
    let nearest: Vec<Option<usize>> = (0..cams.len()).map(|i| nearest_view(&cams, i)).collect();
    let mut pairs_of: Vec<Vec<usize>> = vec![Vec::new(); data.views.len()];
    for (k, p) in data.priors.iter().enumerate() {
        pairs_of[p.primary].push(k);
    }

    let mut log = Vec::new();
    for iter in 0..cfg.iters {
        let w = cfg.weights.active(iter, cfg.iters);
        let want_pair = w.vip > 0.0 || w.visibility > 0.0;
        let mut r = iter_rng(cfg.seed, iter);
        let mut specs = Vec::with_capacity(cfg.batch + cfg.depth_batch);
        for _ in 0..cfg.batch {
            let view = r.gen_range(0..data.views.len());
            let img = &data.views[view].image;
            let x = r.gen_range(0..img.width);
            let y = r.gen_range(0..img.height);
            let (secondary, tau) = if want_pair && !pairs_of[view].is_empty() {
                let p = &data.priors[pairs_of[view][r.gen_range(0..pairs_of[view].len())]];
                (Some(p.secondary), p.visible.get(x, y))
            } else {
                (None, false)
            };
            specs.push(RaySpec { view, x: x as f64, y: y as f64, secondary, tau, depth_ref: None, seed: r.next_u64() });
        }
        if w.sparse_depth > 0.0 && !data.sparse_depth.is_empty() {
            for _ in 0..cfg.depth_batch {
                let p = data.sparse_depth[r.gen_range(0..data.sparse_depth.len())];
                specs.push(RaySpec {
                    view: p.view,
                    x: p.x,
                    y: p.y,
                    secondary: None,
                    tau: false,
                    depth_ref: Some(p.z),
                    seed: r.next_u64(),
                });
            }
        }

        let states: Vec<RayState> = specs
            .par_iter()
            .with_min_len(CHUNK)
            .map(|s| forward(&models, data, cfg, s))
            .collect();

        let (terms, psnr_mse, grads) = ray_losses(&models, data, cfg, &w, &specs, &states, &nearest)?;
        let loss = losses::total_loss(&terms, &cfg.weights, iter, cfg.iters);

        let gsum = backward(&models, &states, &grads);
        let lrs: Vec<f64> = kinds.iter().map(|&k| cfg.lr.for_kind(k).at(iter, cfg.iters)).collect();
        {
            let mut params: Vec<&mut Vec<f64>> = Vec::new();
            for m in models.all_mut() {
                params.extend(m.blocks_mut());
            }
            adam.update(&mut params, &gsum, &names, &lrs)?;
        }
        if iter % cfg.log_every.max(1) == 0 || iter + 1 == cfg.iters {
            log.push(LogEntry { iter, loss, psnr: psnr_from_mse(psnr_mse, 1.0), lr: cfg.lr.network.at(iter, cfg.iters) });
        }
    }
    Ok(StaticFit {
        coarse: models.coarse,
        fine: models.fine,
        augmented: models.aug,
        log,
        samples: cfg.samples,
        fine_samples: cfg.fine_samples,
    })
}

fn model_tags(m: &Models) -> Vec<String> {
    let mut t = vec!["coarse".to_string()];
    if m.fine.is_some() {
        t.push("fine".into());
    }
    t.extend((0..m.aug.len()).map(|k| format!("aug{k}")));
    t
}

fn forward(models: &Models, data: &StaticData, cfg: &StaticFitConfig, s: &RaySpec) -> RayState {
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let cam = &data.views[s.view].camera;
    let ray = cam.ray(&Vector2::new(s.x, s.y));
    let sec = s.secondary.map(|j| &data.views[j].camera);
    let samples = sample_ray(&models.coarse, data.near, data.far, cfg.samples, Some(&mut rng as &mut dyn RngCore));
    let coarse = trace_ray(&models.coarse, None, &ray, samples, RayTime::default(), sec);
    let fine = models.fine.as_ref().map(|f| {
        let s = hierarchical_resample(&coarse.result.weights, &coarse.samples.depths, data.far, cfg.fine_samples, &mut rng);
        trace_ray(f, None, &ray, s, RayTime::default(), None)
    });
    let aug = models
        .aug
        .iter()
        .map(|a| {
            let s = sample_ray(a, data.near, data.far, cfg.samples, Some(&mut rng as &mut dyn RngCore));
            trace_ray(a, None, &ray, s, RayTime::default(), None)
        })
        .collect();
    let mut gt = [0.0; 3];
    sample_bilinear_into(&data.views[s.view].image, s.x, s.y, &mut gt);
    RayState { coarse, fine, aug, gt }
}

/// Per-model, per-ray upstream gradients.
type RayGrads = Vec<Vec<RayGrad>>;

#[allow(clippy::too_many_arguments)]
fn ray_losses(
    models: &Models,
    data: &StaticData,
    cfg: &StaticFitConfig,
    w: &LossWeights,
    specs: &[RaySpec],
    states: &[RayState],
    nearest: &[Option<usize>],
) -> Result<(LossTerms, f64, RayGrads)> {
    let n_models = models.all().len();
    let has_fine = models.fine.is_some();
    let aug0 = if has_fine { 2 } else { 1 };
    let mut g: RayGrads = (0..n_models).map(|_| vec![RayGrad::default(); specs.len()]).collect();
    let mut terms = LossTerms::default();
    let photo: Vec<usize> = (0..specs.len()).filter(|&i| specs[i].depth_ref.is_none()).collect();
    let gts: Vec<[f64; 3]> = photo.iter().map(|&i| states[i].gt).collect();

    // main model levels: coarse, then fine
    let final_level = aug0 - 1;
    let mut psnr_mse = 0.0;
    for m in 0..aug0 {
        let pred: Vec<[f64; 3]> = photo.iter().map(|&i| trace_of(&states[i], m, has_fine).result.color).collect();
        let (l, gr) = losses::photometric(&pred, &gts);
        terms.photometric += l;
        if m == final_level {
            psnr_mse = l;
        }
        for (k, &i) in photo.iter().enumerate() {
            g[m][i].color = gr[k].map(|v| v * w.photometric);
        }
        // visibility terms attach to the coarse pass only
        if w.vip > 0.0 && m == 0 {
            let idx: Vec<usize> = photo.iter().copied().filter(|&i| specs[i].secondary.is_some()).collect();
            let tau: Vec<bool> = idx.iter().map(|&i| specs[i].tau).collect();
            let tp: Vec<f64> = idx.iter().map(|&i| trace_of(&states[i], m, has_fine).result.t_prime.unwrap_or(0.0)).collect();
            let (l, gr) = losses::vip(&tau, &tp);
            terms.vip += l;
            for (k, &i) in idx.iter().enumerate() {
                g[m][i].t_prime = gr[k] * w.vip;
            }
        }
        if w.visibility > 0.0 && m == 0 && !photo.is_empty() {
            let inv = 1.0 / photo.len() as f64;
            // the head follows the rendered transmittance from the start; the
            // pull on the density waits for the prior's warmup
            let geo = if w.vip > 0.0 || cfg.weights.vip == 0.0 { w.visibility } else { 0.0 };
            for &i in &photo {
                let r = &trace_of(&states[i], m, has_fine).result;
                let Some(vis) = &r.vis else { continue };
                let (l, pg) = losses::visibility_consistency(&r.transmittance, vis);
                terms.visibility += l * inv;
                g[m][i].transmittance = pg.a.iter().map(|v| v * inv * geo).collect();
                g[m][i].vis = pg.b.iter().map(|v| v * inv * w.visibility).collect();
            }
        }
    }

    let depth_rays: Vec<usize> = (0..specs.len()).filter(|&i| specs[i].depth_ref.is_some()).collect();
    if !depth_rays.is_empty() {
        let zref: Vec<f64> = depth_rays.iter().map(|&i| specs[i].depth_ref.unwrap()).collect();
        for m in 0..n_models {
            let z: Vec<f64> = depth_rays.iter().map(|&i| trace_of(&states[i], m, has_fine).result.depth).collect();
            let (l, gr) = losses::sparse_depth(&z, &zref);
            terms.sparse_depth += l;
            for (k, &i) in depth_rays.iter().enumerate() {
                g[m][i].depth += gr[k] * w.sparse_depth;
            }
        }
    }

    for a in 0..models.aug.len() {
        let m = aug0 + a;
        let pred: Vec<[f64; 3]> = photo.iter().map(|&i| states[i].aug[a].result.color).collect();
        let (l, gr) = losses::photometric(&pred, &gts);
        terms.photometric_aug += l;
        for (k, &i) in photo.iter().enumerate() {
            g[m][i].color = gr[k].map(|v| v * w.photometric_aug);
        }
        if w.aug > 0.0 {
            let (zm, za, mm, ma) = mutual_inputs(data, cfg, specs, &photo, nearest, |i| {
                (states[i].fine.as_ref().unwrap_or(&states[i].coarse).result.depth, states[i].aug[a].result.depth)
            });
            let (l, pg) = losses::aug(&zm, &za, &ma, &mm);
            terms.aug += l;
            for (k, &i) in photo.iter().enumerate() {
                g[final_level][i].depth += pg.a[k] * w.aug;
                g[m][i].depth += pg.b[k] * w.aug;
            }
        }
        if w.mass_concentration > 0.0 && !photo.is_empty() {
            let inv = 1.0 / photo.len() as f64;
            for &i in &photo {
                let (h, gw) = losses::mass_concentration(&states[i].aug[a].result.weights, cfg.n_mc)?;
                terms.mass_concentration += h * inv;
                g[m][i].weights = gw.iter().map(|v| v * inv * w.mass_concentration).collect();
            }
        }
    }

    if has_fine && w.coarse_fine > 0.0 {
        let (zc, zf, mc, mf) = mutual_inputs(data, cfg, specs, &photo, nearest, |i| {
            (states[i].coarse.result.depth, states[i].fine.as_ref().unwrap().result.depth)
        });
        let (l, pg) = losses::coarse_fine(&zc, &zf, &mc, &mf);
        terms.coarse_fine += l;
        for (k, &i) in photo.iter().enumerate() {
            g[0][i].depth += pg.a[k] * w.coarse_fine;
            g[1][i].depth += pg.b[k] * w.coarse_fine;
        }
    }
    Ok((terms, psnr_mse, g))
}

fn trace_of(s: &RayState, m: usize, has_fine: bool) -> &RayTrace {
    match (m, has_fine) {
        (0, _) => &s.coarse,
        (1, true) => s.fine.as_ref().unwrap(),
        (k, true) => &s.aug[k - 2],
        (k, false) => &s.aug[k - 1],
    }
}

/// Depth pairs of the photometric rays with the masks marking where the
/// first and the second depth are trusted.
fn mutual_inputs(
    data: &StaticData,
    cfg: &StaticFitConfig,
    specs: &[RaySpec],
    photo: &[usize],
    nearest: &[Option<usize>],
    depths: impl Fn(usize) -> (f64, f64) + Sync,
) -> (Vec<f64>, Vec<f64>, Vec<bool>, Vec<bool>) {
    let rows: Vec<(f64, f64, bool, bool)> = photo
        .par_iter()
        .map(|&i| {
            let s = &specs[i];
            let (z1, z2) = depths(i);
            let (m1, m2) = match nearest[s.view] {
                Some(j) => {
                    let r = reliability_at(data.view(s.view), data.view(j), &Vector2::new(s.x, s.y), z1, z2, cfg.patch, cfg.e_tau);
                    (r.m_m, r.m_a)
                }
                None => (false, false),
            };
            (z1, z2, m1, m2)
        })
        .collect();
    let mut out = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (a, b, c, d) in rows {
        out.0.push(a);
        out.1.push(b);
        out.2.push(c);
        out.3.push(d);
    }
    out
}

fn backward(models: &Models, states: &[RayState], g: &RayGrads) -> Vec<Vec<f64>> {
    let all = models.all();
    let has_fine = models.fine.is_some();
    let idx: Vec<usize> = (0..states.len()).collect();
    let partial: Vec<Vec<Grads>> = idx
        .par_chunks(CHUNK)
        .map(|chunk| {
            all.iter()
                .enumerate()
                .map(|(m, model)| {
                    let mut gr = model.zero_grads();
                    for &i in chunk {
                        backward_ray(model, None, trace_of(&states[i], m, has_fine), &g[m][i], &mut gr, None);
                    }
                    gr
                })
                .collect()
        })
        .collect();
    let mut total: Vec<Grads> = all.iter().map(|m| m.zero_grads()).collect();
    for p in &partial {
        for (t, q) in total.iter_mut().zip(p) {
            t.add(q);
        }
    }
    total.into_iter().flat_map(|g| g.0).collect()
}
