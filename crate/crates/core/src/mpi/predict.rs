//! Temporal view synthesis: predict the frames between two rendered frames
//! `k` steps apart from the most recent one and the 3D motion between them.

use serde::{Deserialize, Serialize};

use super::flow::{estimate_flow3d, extrapolate_flow, Flow3D, FlowConfig};
use super::infill::{infill, InfillConfig};
use super::{build_mpi, composite, warp_mpi, Mpi, DEFAULT_PLANES};
use crate::error::{Error, Result};
use crate::eval::aepe;
use crate::geometry::Camera;
use crate::image::{Image, Mask};

/// Opacity below which a warped pixel counts as a hole.
const HOLE: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct FrameData {
    pub rgb: Image,
    pub depth: Image,
    pub camera: Camera,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TvsConfig {
    pub planes: usize,
    /// Plane range `[z_min, z_max]`; taken from the two input frames when
    /// absent.
    pub depth_range: Option<[f64; 2]>,
    pub flow: FlowConfig,
    pub infill: InfillConfig,
}

impl Default for TvsConfig {
    fn default() -> Self {
        Self { planes: DEFAULT_PLANES, depth_range: None, flow: FlowConfig::default(), infill: InfillConfig::default() }
    }
}

/// Which stages use ground truth instead of the estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundMode {
    Predicted,
    GtFlow,
    GtFlowGtInfill,
}

impl BoundMode {
    pub const ALL: [BoundMode; 3] = [BoundMode::Predicted, BoundMode::GtFlow, BoundMode::GtFlowGtInfill];

    pub fn name(self) -> &'static str {
        match self {
            BoundMode::Predicted => "predicted",
            BoundMode::GtFlow => "gt-flow",
            BoundMode::GtFlowGtInfill => "gt-flow,gt-infill",
        }
    }
}

/// Reference data for the bound analysis and for scoring.
#[derive(Debug, Clone, Default)]
pub struct GroundTruth {
    /// Object motion `n -> n - k` in view `n`, channels `(dx, dy, dz)`.
    pub backward: Option<Image>,
    /// Object motion `n -> n + k'` in view `n`, one per predicted frame.
    pub forward: Vec<Image>,
    /// True frames `n + k'`.
    pub frames: Vec<Image>,
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub k_prime: usize,
    pub rgb: Image,
    pub depth: Image,
    /// Pixels the warped MPI left mostly uncovered.
    pub holes: Mask,
    /// Pixels that received no alpha at all.
    pub disocclusion: Mask,
    pub unfilled: Mask,
}

#[derive(Debug, Clone)]
pub struct TvsOutput {
    pub mpi: Mpi,
    pub prev_warped: Mpi,
    pub flow: Flow3D,
    /// Error of the estimated flow against `GroundTruth::backward` on the
    /// moving pixels.
    pub aepe: Option<f64>,
    pub predictions: Vec<Prediction>,
}

/// Depth range of a set of depth maps; a degenerate range is widened
/// slightly.
pub fn depth_range<'a>(maps: impl IntoIterator<Item = &'a Image>) -> [f64; 2] {
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for &d in maps.into_iter().flat_map(|m| m.data.iter()) {
        lo = lo.min(d);
        hi = hi.max(d);
    }
    if hi <= lo * (1.0 + 1e-6) {
        hi = lo * 1.01;
    }
    [lo, hi]
}

fn check_frame(f: &FrameData, name: &str) -> Result<()> {
    let c = &f.camera;
    if f.rgb.channels != 3 || f.depth.channels != 1 || f.rgb.width != c.width || f.rgb.height != c.height
        || f.depth.width != c.width || f.depth.height != c.height
    {
        return Err(Error::Shape(format!("{name} frame does not match its camera")));
    }
    Ok(())
}

/// Predicts frames `n + 1 .. n + k - 1` at the `future` cameras from frames
/// `n - k` (`prev`) and `n` (`cur`).
pub fn predict_frames(
    prev: &FrameData,
    cur: &FrameData,
    future: &[Camera],
    k: usize,
    cfg: &TvsConfig,
    mode: BoundMode,
    gt: &GroundTruth,
) -> Result<TvsOutput> {
    check_frame(prev, "previous")?;
    check_frame(cur, "current")?;
    if k == 0 || future.len() + 1 != k {
        return Err(Error::Config(format!("k = {k} needs k - 1 future cameras, got {}", future.len())));
    }
    if mode != BoundMode::Predicted && gt.forward.len() != future.len() {
        return Err(Error::Config("bound modes need ground-truth flow for every predicted frame".into()));
    }
    if mode == BoundMode::GtFlowGtInfill && gt.frames.len() != future.len() {
        return Err(Error::Config("ground-truth infilling needs every true frame".into()));
    }
    let [z_min, z_max] = cfg.depth_range.unwrap_or_else(|| depth_range([&prev.depth, &cur.depth]));
    let m_prev = build_mpi(&prev.rgb, &prev.depth, cfg.planes, z_min, z_max)?;
    let m_n = build_mpi(&cur.rgb, &cur.depth, cfg.planes, z_min, z_max)?;
    // null the camera motion so only object motion remains
    let (prev_warped, _) = warp_mpi(&m_prev, None, &prev.camera, &cur.camera);
    let flow = estimate_flow3d(&m_n, &prev_warped, &cfg.flow);
    let aepe = gt.backward.as_ref().map(|g| {
        let est = flow.to_image(&m_n);
        let moving = Mask {
            width: g.width,
            height: g.height,
            data: (0..g.len_pixels()).map(|p| g.pixel(p % g.width, p / g.width)[..2].iter().any(|v| *v != 0.0)).collect(),
        };
        if moving.count() > 0 {
            aepe(&est, g, Some(&moving))
        } else {
            aepe(&est, g, None)
        }
    });
    let mut predictions = Vec::with_capacity(future.len());
    for (j, cam) in future.iter().enumerate() {
        let kp = j + 1;
        let f = match mode {
            BoundMode::Predicted => extrapolate_flow(&flow, k, kp),
            _ => Flow3D::from_dense(&m_n, &gt.forward[j], flow.s_z),
        };
        let (warped, disocclusion) = warp_mpi(&m_n, Some(&f), &cur.camera, cam);
        let opacity = warped.opacity();
        let holes = Mask {
            width: cam.width,
            height: cam.height,
            data: opacity.data.iter().map(|&o| o < HOLE).collect(),
        };
        let filled = infill(&warped, &holes, &cfg.infill);
        let (mut rgb, mut depth) = composite(&filled.mpi);
        // splatting leaves slight gaps where neighboring flows differ
        let opacity = filled.mpi.opacity();
        for (p, &o) in opacity.data.iter().enumerate() {
            if o > 0.0 && o < 1.0 {
                rgb.data[3 * p..3 * p + 3].iter_mut().for_each(|v| *v /= o);
                depth.data[p] /= o;
            }
        }
        if mode == BoundMode::GtFlowGtInfill {
            let g = &gt.frames[j];
            for p in 0..holes.data.len() {
                if holes.data[p] {
                    rgb.data[3 * p..3 * p + 3].copy_from_slice(&g.data[3 * p..3 * p + 3]);
                }
            }
        }
        predictions.push(Prediction { k_prime: kp, rgb, depth, holes, disocclusion, unfilled: filled.unfilled });
    }
    Ok(TvsOutput { mpi: m_n, prev_warped, flow, aepe, predictions })
}
