use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use sparseview::eval::{depth_metrics, psnr, psnr_masked, ssim, visibility_prf, MetricReport, SsimParams};
use sparseview::fields::checkpoint::ModelBundle;
use sparseview::fields::{Aabb, DecoderConfig, FieldConfig, ModelConfig};
use sparseview::geometry::Camera;
use sparseview::gradcheck::{self, GradcheckConfig};
use sparseview::image::{Image, Mask};
use sparseview::mpi::{depth_range, predict_frames, BoundMode, FrameData, GroundTruth, TvsConfig};
use sparseview::optim::dynamic_fit::ray_time;
use sparseview::optim::{fit_dynamic, fit_static, DynamicData, DynamicFitConfig, StaticData, StaticFitConfig};
use sparseview::priors::{build_psv, visibility_prior, View};
use sparseview::render::{render_image, RayTime};
use sparseview::scenes::io::{read_json, read_pfm, read_png, write_json, write_pfm, write_png, write_text, Dataset};

use crate::config::FitMode;
use crate::scene_file::SceneFile;
use crate::RunContext;

fn create_out(ctx: &RunContext) -> Result<PathBuf> {
    let out = ctx.out()?.clone();
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    Ok(out)
}

/// Every declared output must exist and be non-empty before we report
/// success.
fn verify(paths: &[PathBuf]) -> Result<()> {
    for p in paths {
        let len = fs::metadata(p).with_context(|| format!("output {} was not written", p.display()))?.len();
        ensure!(len > 0, "output {} is empty", p.display());
    }
    Ok(())
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    Dataset::load(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

pub fn gen_scene(ctx: &RunContext, scene: &Path) -> Result<()> {
    let file = SceneFile::load(scene)?;
    let ds = file.dataset(ctx.seed.unwrap_or(0))?;
    let out = create_out(ctx)?;
    ds.save(&out)?;
    let back = load_dataset(&out)?;
    ensure!(back.views() == ds.views() && back.frames() == ds.frames(), "dataset did not round-trip");
    println!("wrote {} views x {} frames to {}", ds.views(), ds.frames(), out.display());
    Ok(())
}

pub struct VisPriorParams {
    pub primary: usize,
    pub secondary: usize,
    pub planes: usize,
    pub gamma: f64,
    pub frame: usize,
}

pub fn vis_prior(ctx: &RunContext, dataset: &Path, p: &VisPriorParams) -> Result<()> {
    let ds = load_dataset(dataset)?;
    for v in [p.primary, p.secondary] {
        ensure!(v < ds.views(), "view {v} not in dataset ({} views)", ds.views());
    }
    ensure!(p.primary != p.secondary, "primary and secondary views must differ");
    ensure!(p.frame < ds.frames(), "frame {} not in dataset", p.frame);
    ensure!(p.planes >= 2, "need at least two planes");
    ensure!(p.gamma.is_finite() && p.gamma > 0.0, "gamma must be positive");
    let view = |v: usize| View { camera: &ds.cameras[v][p.frame], image: &ds.rgb[v][p.frame] };
    let psv = build_psv(view(p.primary), view(p.secondary), p.planes, ds.z_near, ds.z_far);
    let prior = visibility_prior(&psv, p.gamma);
    let out = create_out(ctx)?;
    let mut outputs = vec![out.join("prior.png"), out.join("min_error.pfm"), out.join("report.txt")];
    write_png(&outputs[0], &prior.visible.to_image())?;
    write_pfm(&outputs[1], &prior.min_error)?;
    let mut report = MetricReport::default();
    if let Some(spec) = &ds.spec {
        let gt = spec.gt_visibility(p.primary, p.secondary, p.frame);
        let path = out.join("gt_visibility.png");
        write_png(&path, &gt.to_image())?;
        outputs.push(path);
        report.visibility = Some(visibility_prf(&prior.visible, &gt));
    }
    write_text(&outputs[2], &report.to_kv())?;
    verify(&outputs)?;
    match report.visibility {
        Some(v) => println!("precision={:.4} recall={:.4} f1={:.4}", v.precision, v.recall, v.f1),
        None => println!("no scene description in the dataset; prior written without a reference"),
    }
    Ok(())
}

/// Rendering parameters stored next to a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitMeta {
    pub mode: FitMode,
    pub near: f64,
    pub far: f64,
    pub samples: usize,
}

fn meta_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("json")
}

/// Box covering every camera frustum between the dataset's near and far
/// depths.
fn frustum_bbox(ds: &Dataset) -> Result<Aabb> {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for cam in ds.cameras.iter().flatten() {
        let (w, h) = ((cam.width - 1) as f64, (cam.height - 1) as f64);
        for (x, y) in [(0.0, 0.0), (w, 0.0), (0.0, h), (w, h)] {
            for z in [ds.z_near, ds.z_far] {
                let p = cam.backproject(&Vector2::new(x, y), z);
                for a in 0..3 {
                    lo[a] = lo[a].min(p[a]);
                    hi[a] = hi[a].max(p[a]);
                }
            }
        }
    }
    Ok(Aabb::new(lo, hi)?)
}

fn default_model(ds: &Dataset, head: bool) -> Result<ModelConfig> {
    Ok(ModelConfig {
        bbox: frustum_bbox(ds)?,
        field: FieldConfig::Voxel { resolution: [48, 36, 48], feature_dim: 6 },
        decoder: DecoderConfig { view_degrees: 2, visibility_head: head, ..Default::default() },
        density_shift: -1.0,
        hidden: 32,
    })
}

const DEFAULT_ITERS: usize = 1000;

pub fn fit(ctx: &RunContext, dataset: &Path, mode: FitMode, iters: Option<usize>) -> Result<()> {
    let ds = load_dataset(dataset)?;
    let sec = &ctx.config.fit;
    let views = sec.views.clone().unwrap_or_else(|| (0..ds.views()).collect());
    ensure!(!views.is_empty(), "no training views");
    let out = create_out(ctx)?;
    let ckpt = out.join("model.ckpt");
    let (bundle, log, meta, resolved) = match mode {
        FitMode::Static => {
            let mut cfg = sec.static_fit.clone().unwrap_or_else(|| StaticFitConfig {
                iters: iters.unwrap_or(DEFAULT_ITERS),
                batch: 256,
                ..Default::default()
            });
            if let Some(s) = ctx.seed {
                cfg.seed = s;
            }
            let head = cfg.weights.vip > 0.0 || cfg.weights.visibility > 0.0;
            let model = match &sec.model {
                Some(m) => m.clone(),
                None => default_model(&ds, head)?,
            };
            let mut data = StaticData::from_dataset(&ds, &views, sec.frame.unwrap_or(0))?;
            if head {
                let planes = sec.prior_planes.unwrap_or(sparseview::priors::DEFAULT_PLANES);
                data.build_priors(planes, sec.prior_gamma.unwrap_or(sparseview::priors::DEFAULT_GAMMA));
            }
            let fit = fit_static(&data, &model, &cfg)?;
            let (img, _) = fit.render(&data.views[0].camera, data.near, data.far);
            println!("training view psnr {:.3}", psnr(&img, &data.views[0].image, 1.0));
            let meta = FitMeta { mode, near: data.near, far: data.far, samples: fit.samples + fit.fine_samples };
            let bundle = ModelBundle { model: fit.main().clone(), motion: None };
            let resolved = serde_json::json!({ "mode": mode, "views": views, "model": model, "static": cfg });
            (bundle, fit.log_text(), meta, resolved)
        }
        FitMode::Dynamic => {
            let mut cfg = sec.dynamic.clone().unwrap_or_else(|| DynamicFitConfig {
                iters: iters.unwrap_or(DEFAULT_ITERS),
                batch: 256,
                ..Default::default()
            });
            if let Some(s) = ctx.seed {
                cfg.seed = s;
            }
            let model = match &sec.model {
                Some(m) => m.clone(),
                None => default_model(&ds, false)?,
            };
            let data = DynamicData::from_dataset(&ds, &views)?;
            let fit = fit_dynamic(&data, &model, &cfg)?;
            let meta = FitMeta { mode, near: data.near, far: data.far, samples: fit.samples };
            let bundle = ModelBundle { model: fit.model.clone(), motion: Some(fit.motion.clone()) };
            let resolved = serde_json::json!({ "mode": mode, "views": views, "model": model, "dynamic": cfg });
            (bundle, fit.log_text(), meta, resolved)
        }
    };
    bundle.save(&ckpt)?;
    write_json(&meta_path(&ckpt), &meta)?;
    write_text(&out.join("log.txt"), &log)?;
    write_json(&out.join("resolved.json"), &resolved)?;
    ModelBundle::load(&ckpt).context("re-reading the checkpoint")?;
    verify(&[ckpt.clone(), meta_path(&ckpt), out.join("log.txt"), out.join("resolved.json")])?;
    println!("wrote {}", ckpt.display());
    Ok(())
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct Pose {
    camera: Camera,
    #[serde(default)]
    frame: usize,
    /// Output file stem; the pose index when absent.
    #[serde(default)]
    name: Option<String>,
}

/// A pose list, or a dataset `cameras.json` (`[view][frame]`).
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum PoseFile {
    // first: a pose struct would also accept a one-element camera array
    Rig(Vec<Vec<Camera>>),
    Poses(Vec<Pose>),
}

fn load_poses(path: &Path) -> Result<Vec<Pose>> {
    let file: PoseFile = read_json(path).with_context(|| format!("reading poses {}", path.display()))?;
    Ok(match file {
        PoseFile::Poses(p) => p,
        PoseFile::Rig(r) => r
            .into_iter()
            .enumerate()
            .flat_map(|(v, cams)| {
                cams.into_iter()
                    .enumerate()
                    .map(move |(frame, camera)| Pose { camera, frame, name: Some(format!("v{v}_t{frame}")) })
            })
            .collect(),
    })
}

pub fn render(ctx: &RunContext, checkpoint: &Path, poses: &Path) -> Result<()> {
    let bundle = ModelBundle::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let meta: FitMeta = read_json(&meta_path(checkpoint))?;
    let poses = load_poses(poses)?;
    ensure!(!poses.is_empty(), "pose list is empty");
    let samples = ctx.config.render.samples.unwrap_or(meta.samples);
    ensure!(samples >= 2, "need at least two samples per ray");
    let out = create_out(ctx)?;
    for sub in ["rgb", "depth"] {
        fs::create_dir_all(out.join(sub)).with_context(|| format!("creating {}/{sub}", out.display()))?;
    }
    let mut outputs = Vec::new();
    for (i, pose) in poses.iter().enumerate() {
        let time = match &bundle.motion {
            Some(m) => {
                ensure!(pose.frame < m.frames, "pose {i} asks for frame {} of {}", pose.frame, m.frames);
                ray_time(pose.frame as f64, m.frames)
            }
            None => RayTime::default(),
        };
        let (rgb, depth) =
            render_image(&bundle.model, bundle.motion.as_ref(), &pose.camera, meta.near, meta.far, samples, time);
        let stem = pose.name.clone().unwrap_or_else(|| format!("{i:04}"));
        ensure!(!stem.is_empty() && !stem.contains(['/', '\\']), "pose {i} has an invalid name");
        let (a, b) = (out.join(format!("rgb/{stem}.png")), out.join(format!("depth/{stem}.pfm")));
        write_png(&a, &rgb)?;
        write_pfm(&b, &depth)?;
        outputs.extend([a, b]);
    }
    verify(&outputs)?;
    println!("rendered {} poses to {}", poses.len(), out.display());
    Ok(())
}

pub fn parse_bounds(names: &[String]) -> Result<Vec<BoundMode>> {
    if names.is_empty() {
        return Ok(vec![BoundMode::Predicted]);
    }
    let mut modes = Vec::new();
    for n in names {
        if n == "all" {
            modes.extend(BoundMode::ALL);
            continue;
        }
        match BoundMode::ALL.iter().find(|m| m.name() == n) {
            Some(m) => modes.push(*m),
            None => bail!("unknown bound mode `{n}` (expected predicted, gt-flow, gt-flow,gt-infill or all)"),
        }
    }
    let mut seen = Vec::new();
    modes.retain(|m| {
        let fresh = !seen.contains(m);
        seen.push(*m);
        fresh
    });
    Ok(modes)
}

pub struct TvsParams {
    pub k: usize,
    pub frame: usize,
    pub view: usize,
    pub modes: Vec<BoundMode>,
}

fn mode_dir(m: BoundMode) -> String {
    m.name().replace(',', "+")
}

pub fn tvs(ctx: &RunContext, dataset: &Path, p: &TvsParams) -> Result<()> {
    let ds = load_dataset(dataset)?;
    ensure!(p.k >= 1, "k must be at least 1");
    ensure!(p.view < ds.views(), "view {} not in dataset", p.view);
    ensure!(p.frame >= p.k, "frame {} has no input {} frames earlier", p.frame, p.k);
    let last = p.frame + p.k - 1;
    ensure!(last < ds.frames(), "predicting up to frame {last} needs that many frames (dataset has {})", ds.frames());
    let v = p.view;
    let frame = |t: usize| FrameData { rgb: ds.rgb[v][t].clone(), depth: ds.depth[v][t].clone(), camera: ds.cameras[v][t].clone() };
    let (prev, cur) = (frame(p.frame - p.k), frame(p.frame));
    let future: Vec<Camera> = (1..p.k).map(|j| ds.cameras[v][p.frame + j].clone()).collect();
    let mut cfg: TvsConfig = ctx.config.tvs.mpi.clone().unwrap_or_default();
    if cfg.depth_range.is_none() {
        cfg.depth_range = Some(depth_range(&ds.depth[v]));
    }
    let gt = GroundTruth {
        backward: ds.spec.as_ref().map(|s| s.gt_object_flow(v, p.frame, p.frame - p.k)),
        forward: match &ds.spec {
            Some(s) => (1..p.k).map(|j| s.gt_object_flow(v, p.frame, p.frame + j)).collect(),
            None => Vec::new(),
        },
        frames: (1..p.k).map(|j| ds.rgb[v][p.frame + j].clone()).collect(),
    };
    if ds.spec.is_none() && p.modes.iter().any(|m| *m != BoundMode::Predicted) {
        bail!("bound modes other than `predicted` need the scene description in the dataset");
    }
    let out = create_out(ctx)?;
    let mut report = String::from("mode frame psnr covered_psnr holes aepe\n");
    let mut outputs = Vec::new();
    for &mode in &p.modes {
        let res = predict_frames(&prev, &cur, &future, p.k, &cfg, mode, &gt)?;
        let dir = out.join(mode_dir(mode));
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let aepe = res.aepe.map_or("-".to_string(), |a| format!("{a:.6}"));
        for pred in &res.predictions {
            let t = p.frame + pred.k_prime;
            let reference = &ds.rgb[v][t];
            let covered = Mask { data: pred.holes.data.iter().map(|h| !h).collect(), ..pred.holes.clone() };
            let line = format!(
                "{} {t} {:.6} {:.6} {} {aepe}",
                mode.name(),
                psnr(&pred.rgb, reference, 1.0),
                psnr_masked(&pred.rgb, reference, &covered, 1.0),
                pred.holes.count(),
            );
            println!("{line}");
            report += &line;
            report.push('\n');
            let files = [dir.join(format!("frame_{t:04}.png")), dir.join(format!("depth_{t:04}.pfm")), dir.join(format!("holes_{t:04}.png"))];
            write_png(&files[0], &pred.rgb)?;
            write_pfm(&files[1], &pred.depth)?;
            write_png(&files[2], &pred.holes.to_image())?;
            outputs.extend(files);
        }
        if res.predictions.is_empty() {
            println!("{} aepe {aepe}", mode.name());
            report += &format!("{} {} - - - {aepe}\n", mode.name(), p.frame);
        }
    }
    let path = out.join("report.txt");
    write_text(&path, &report)?;
    outputs.push(path);
    verify(&outputs)
}

/// Image pairs with the same file stem; datasets keep colors under `rgb/`
/// and depths under `depth/`.
fn files_with_ext(dir: &Path, ext: &str) -> Result<Vec<(String, PathBuf)>> {
    let sub = dir.join(if ext == "png" { "rgb" } else { "depth" });
    let dir = if sub.is_dir() { sub } else { dir.to_path_buf() };
    let mut out = Vec::new();
    for e in fs::read_dir(&dir).with_context(|| format!("listing {}", dir.display()))? {
        let p = e?.path();
        if p.extension().is_some_and(|x| x == ext) {
            if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                out.push((stem.to_string(), p));
            }
        }
    }
    out.sort();
    Ok(out)
}

fn pairs(pred: &Path, gt: &Path, ext: &str) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    let gt_files = files_with_ext(gt, ext)?;
    Ok(files_with_ext(pred, ext)?
        .into_iter()
        .filter_map(|(s, p)| gt_files.iter().find(|(g, _)| *g == s).map(|(_, q)| (s, p, q.clone())))
        .collect())
}

enum MaskPolicy {
    All,
    ValidDepth,
    Dir(PathBuf),
}

impl MaskPolicy {
    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "all" => Self::All,
            "valid-depth" => Self::ValidDepth,
            _ => match s.strip_prefix("dir:") {
                Some(d) => Self::Dir(PathBuf::from(d)),
                None => bail!("unknown mask policy `{s}` (expected all, valid-depth or dir:PATH)"),
            },
        })
    }

    fn mask(&self, gt: &Path, stem: &str, w: usize, h: usize) -> Result<Option<Mask>> {
        let threshold = |img: &Image, keep: &dyn Fn(f64) -> bool| -> Result<Mask> {
            ensure!(img.width == w && img.height == h, "mask for `{stem}` has the wrong size");
            Ok(Mask { width: w, height: h, data: (0..w * h).map(|i| keep(img.data[i * img.channels])).collect() })
        };
        match self {
            Self::All => Ok(None),
            Self::ValidDepth => {
                let d = files_with_ext(gt, "pfm")?
                    .into_iter()
                    .find(|(s, _)| s == stem)
                    .with_context(|| format!("no reference depth for `{stem}`"))?;
                Ok(Some(threshold(&read_pfm(&d.1)?, &|z| z.is_finite() && z > 0.0)?))
            }
            Self::Dir(dir) => Ok(Some(threshold(&read_png(&dir.join(format!("{stem}.png")))?, &|v| v > 0.5)?)),
        }
    }
}

pub fn eval(ctx: &RunContext, pred: &Path, gt: &Path, mask: &str) -> Result<()> {
    let policy = MaskPolicy::parse(mask)?;
    let images = pairs(pred, gt, "png")?;
    let depths = pairs(pred, gt, "pfm")?;
    ensure!(!images.is_empty() || !depths.is_empty(), "no matching images between {} and {}", pred.display(), gt.display());
    let mut report = MetricReport::default();
    if !images.is_empty() {
        let (mut ps, mut ss) = (0.0, 0.0);
        for (stem, a, b) in &images {
            let (a, b) = (read_png(a)?, read_png(b)?);
            ensure!(a.same_shape(&b), "`{stem}` differs in size from its reference");
            ps += match policy.mask(gt, stem, a.width, a.height)? {
                Some(m) => psnr_masked(&a, &b, &m, 1.0),
                None => psnr(&a, &b, 1.0),
            };
            ss += ssim(&a, &b, &SsimParams::default());
        }
        report.psnr = Some(ps / images.len() as f64);
        report.ssim = Some(ss / images.len() as f64);
    }
    if !depths.is_empty() {
        let (mut mae, mut rmse, mut sr) = (0.0, 0.0, 0.0);
        for (stem, a, b) in &depths {
            let (a, b) = (read_pfm(a)?, read_pfm(b)?);
            ensure!(a.same_shape(&b), "depth `{stem}` differs in size from its reference");
            let m = policy.mask(gt, stem, a.width, a.height)?;
            let d = depth_metrics(&a, &b, m.as_ref());
            mae += d.mae;
            rmse += d.rmse;
            sr += d.srocc;
        }
        let n = depths.len() as f64;
        report.depth_mae = Some(mae / n);
        report.depth_rmse = Some(rmse / n);
        report.depth_srocc = Some(sr / n);
    }
    print!("{}", report.to_table());
    if let Some(out) = &ctx.out {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        let path = out.join("report.txt");
        write_text(&path, &report.to_kv())?;
        verify(&[path])?;
    }
    Ok(())
}

pub fn gradcheck(ctx: &RunContext) -> Result<()> {
    let mut cfg: GradcheckConfig = ctx.config.gradcheck.clone().unwrap_or_default();
    if let Some(s) = ctx.seed {
        cfg.seed = s;
    }
    let report = gradcheck::run(&cfg);
    let table = report.to_table();
    print!("{table}");
    if let Some(out) = &ctx.out {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        let path = out.join("gradcheck.txt");
        write_text(&path, &table)?;
        verify(&[path])?;
    }
    let failed = report.checks.iter().filter(|c| !c.passed).count();
    ensure!(failed == 0, "{failed} of {} gradient checks failed", report.checks.len());
    Ok(())
}
