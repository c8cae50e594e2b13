//! Training loop for dynamic scenes: a canonical radiance model and a motion
//! field that maps each sample into the canonical volume.

use nalgebra::Vector2;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::static_fit::TrainView;
use super::{format_log, Adam, LogEntry, LrConfig, LrSchedule};
use crate::error::{Error, Result};
use crate::eval::psnr_from_mse;
use crate::fields::{BlockKind, Grads, HexPlaneField, ModelConfig, RadianceModel};
use crate::geometry::Camera;
use crate::image::{sample_bilinear_into, Image};
use crate::losses::{self, LossTerms, LossWeights};
use crate::priors::sparse::SparseFlowMatch;
use crate::render::{backward_ray, render_image, sample_ray, trace_ray, RayGrad, RayTime, RayTrace};
use crate::scenes::io::Dataset;

const CHUNK: usize = 16;

/// Views of every frame, indexed `[view][frame]`.
#[derive(Debug, Clone)]
pub struct DynamicData {
    pub views: Vec<Vec<TrainView>>,
    pub near: f64,
    pub far: f64,
    /// Matches; `v` and `u` index `views`.
    pub flows: Vec<SparseFlowMatch>,
}

impl DynamicData {
    pub fn from_dataset(ds: &Dataset, views: &[usize]) -> Result<Self> {
        let mut out = Vec::new();
        for &v in views {
            if v >= ds.views() {
                return Err(Error::Config(format!("view {v} not in dataset")));
            }
            out.push(
                (0..ds.frames())
                    .map(|t| TrainView { camera: ds.cameras[v][t].clone(), image: ds.rgb[v][t].clone() })
                    .collect(),
            );
        }
        let index = |v: usize| views.iter().position(|&x| x == v);
        let flows = ds
            .sparse_flow
            .iter()
            .filter_map(|m| Some(SparseFlowMatch { v: index(m.v)?, u: index(m.u)?, ..*m }))
            .collect();
        Ok(Self { views: out, near: ds.z_near, far: ds.z_far, flows })
    }

    pub fn frames(&self) -> usize {
        self.views.first().map_or(0, |v| v.len())
    }
}

/// Shape of the motion field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MotionConfig {
    pub resolutions: Vec<usize>,
    pub time_resolution: usize,
    pub feature_dim: usize,
    pub hidden: usize,
}

impl Default for MotionConfig {
    fn default() -> Self {
        Self { resolutions: vec![8, 16], time_resolution: 8, feature_dim: 8, hidden: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DynamicFitConfig {
    pub iters: usize,
    pub batch: usize,
    pub samples: usize,
    /// Matches per iteration.
    pub flow_batch: usize,
    pub seed: u64,
    pub lr: LrConfig,
    pub motion_lr: LrConfig,
    pub weights: LossWeights,
    pub motion: MotionConfig,
    pub log_every: usize,
}

impl Default for DynamicFitConfig {
    fn default() -> Self {
        Self {
            iters: 25_000,
            batch: 1024,
            samples: 32,
            flow_batch: 32,
            seed: 0,
            lr: LrConfig::default(),
            motion_lr: LrConfig {
                grid: LrSchedule { initial: 1e-2, final_lr: 1e-3 },
                network: LrSchedule { initial: 1e-3, final_lr: 1e-4 },
            },
            weights: LossWeights::default(),
            motion: MotionConfig::default(),
            log_every: 10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DynamicFit {
    pub model: RadianceModel,
    pub motion: HexPlaneField,
    pub log: Vec<LogEntry>,
    pub samples: usize,
}

/// Time of frame `t` out of `frames`.
pub fn ray_time(t: f64, frames: usize) -> RayTime {
    let normalized = if frames > 1 { t / (frames - 1) as f64 } else { 0.0 };
    RayTime { frame: t, normalized }
}

impl DynamicFit {
    pub fn log_text(&self) -> String {
        format_log(&self.log)
    }

    pub fn render(&self, camera: &Camera, t: usize, near: f64, far: f64) -> (Image, Image) {
        render_image(&self.model, Some(&self.motion), camera, near, far, self.samples, ray_time(t as f64, self.motion.frames))
    }
}

#[derive(Debug, Clone, Copy)]
struct Spec {
    view: usize,
    t: usize,
    x: f64,
    y: f64,
    seed: u64,
}

pub fn fit_dynamic(data: &DynamicData, model: &ModelConfig, cfg: &DynamicFitConfig) -> Result<DynamicFit> {
    cfg.weights.validate()?;
    cfg.lr.validate()?;
    cfg.motion_lr.validate()?;
    let frames = data.frames();
    if data.views.is_empty() || frames == 0 || cfg.iters == 0 || cfg.batch == 0 || cfg.samples < 2 {
        return Err(Error::Config("dynamic fit needs views, frames, iterations and samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut field = RadianceModel::new(model.clone(), &mut rng)?;
    let mc = &cfg.motion;
    let mut motion = HexPlaneField::new(
        model.bbox.clone(),
        mc.resolutions.clone(),
        mc.time_resolution,
        mc.feature_dim,
        frames,
        mc.hidden,
        &mut rng,
    )?;
    let mut names: Vec<String> = field.blocks().into_iter().map(|(n, _, _)| n).collect();
    names.extend(["motion.planes".to_string(), "motion.decoder".to_string()]);
    let mut lr_of: Vec<LrSchedule> = field.blocks().into_iter().map(|(_, k, _)| *cfg.lr.for_kind(k)).collect();
    lr_of.push(*cfg.motion_lr.for_kind(BlockKind::Grid));
    lr_of.push(*cfg.motion_lr.for_kind(BlockKind::Network));
    let mut sizes: Vec<usize> = field.blocks().into_iter().map(|(_, _, b)| b.len()).collect();
    sizes.extend([motion.planes.len(), motion.decoder.params.len()]);
    let mut adam = Adam::new(&sizes);

    let mut log = Vec::new();
    for iter in 0..cfg.iters {
        let w = cfg.weights.active(iter, cfg.iters);
        let mut r = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xd1_a417);
        r.set_stream(iter as u64 + 1);
        let mut specs = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let view = r.gen_range(0..data.views.len());
            let t = r.gen_range(0..frames);
            let img = &data.views[view][t].image;
            let x = r.gen_range(0..img.width) as f64;
            let y = r.gen_range(0..img.height) as f64;
            specs.push(Spec { view, t, x, y, seed: r.next_u64() });
        }
        let n_photo = specs.len();
        let mut pairs = Vec::new();
        if w.sparse_flow > 0.0 && !data.flows.is_empty() {
            for _ in 0..cfg.flow_batch {
                let m = data.flows[r.gen_range(0..data.flows.len())];
                pairs.push(specs.len());
                specs.push(Spec { view: m.v, t: m.t, x: m.x, y: m.y, seed: r.next_u64() });
                specs.push(Spec { view: m.u, t: m.s, x: m.x2, y: m.y2, seed: r.next_u64() });
            }
        }

        let traces: Vec<RayTrace> = specs
            .par_iter()
            .with_min_len(CHUNK)
            .map(|s| {
                let mut jr = ChaCha8Rng::seed_from_u64(s.seed);
                let cam = &data.views[s.view][s.t].camera;
                let ray = cam.ray(&Vector2::new(s.x, s.y));
                let smp = sample_ray(&field, data.near, data.far, cfg.samples, Some(&mut jr as &mut dyn RngCore));
                trace_ray(&field, Some(&motion), &ray, smp, ray_time(s.t as f64, frames), None)
            })
            .collect();

        let mut g = vec![RayGrad::default(); specs.len()];
        let mut terms = LossTerms::default();
        let mut pred = Vec::with_capacity(n_photo);
        let mut gt = Vec::with_capacity(n_photo);
        for (s, tr) in specs.iter().zip(&traces).take(n_photo) {
            let mut c = [0.0; 3];
            sample_bilinear_into(&data.views[s.view][s.t].image, s.x, s.y, &mut c);
            gt.push(c);
            pred.push(tr.result.color);
        }
        let (lp, gp) = losses::photometric(&pred, &gt);
        terms.photometric = lp;
        for (k, gr) in gp.iter().enumerate() {
            g[k].color = gr.map(|v| v * w.photometric);
        }
        if !pairs.is_empty() {
            let inv = 1.0 / pairs.len() as f64;
            for &i in &pairs {
                let (l, ga, gb) =
                    losses::sparse_flow(&traces[i].result.canonical_point, &traces[i + 1].result.canonical_point);
                terms.sparse_flow += l * inv;
                g[i].canonical_point = ga.map(|v| v * inv * w.sparse_flow);
                g[i + 1].canonical_point = gb.map(|v| v * inv * w.sparse_flow);
            }
        }
        let loss = losses::total_loss(&terms, &cfg.weights, iter, cfg.iters);

        let idx: Vec<usize> = (0..specs.len()).collect();
        let partial: Vec<(Grads, Vec<Vec<f64>>)> = idx
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut gf = field.zero_grads();
                let mut gm = vec![vec![0.0; motion.planes.len()], vec![0.0; motion.decoder.params.len()]];
                for &i in chunk {
                    backward_ray(&field, Some(&motion), &traces[i], &g[i], &mut gf, Some(&mut gm));
                }
                (gf, gm)
            })
            .collect();
        let mut gf = field.zero_grads();
        let mut gm = vec![vec![0.0; motion.planes.len()], vec![0.0; motion.decoder.params.len()]];
        for (a, b) in &partial {
            gf.add(a);
            for (t, s) in gm.iter_mut().zip(b) {
                t.iter_mut().zip(s).for_each(|(x, y)| *x += y);
            }
        }
        let mut all = gf.0;
        all.extend(gm);
        let lrs: Vec<f64> = lr_of.iter().map(|s| s.at(iter, cfg.iters)).collect();
        {
            let mut params = field.blocks_mut();
            params.push(&mut motion.planes);
            params.push(&mut motion.decoder.params);
            adam.update(&mut params, &all, &names, &lrs)?;
        }
        if iter % cfg.log_every.max(1) == 0 || iter + 1 == cfg.iters {
            log.push(LogEntry { iter, loss, psnr: psnr_from_mse(lp, 1.0), lr: cfg.lr.network.at(iter, cfg.iters) });
        }
    }
    Ok(DynamicFit { model: field, motion, log, samples: cfg.samples })
}
