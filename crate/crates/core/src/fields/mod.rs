//! Explicit radiance and motion fields with their decoders.

pub mod checkpoint;
pub mod encoded;
pub mod encoding;
pub mod grid;
pub mod hash;
pub mod hexplane;
pub mod mlp;
pub mod tensor;
pub mod voxel;

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use encoded::EncodedField;
pub use encoding::positional_encode;
pub use grid::Aabb;
pub use hash::{HashConfig, HashField};
pub use hexplane::HexPlaneField;
pub use mlp::{Decoder, DecoderConfig, DecoderInput, Mlp};
pub use tensor::TensorField;
pub use voxel::VoxelField;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Voxel,
    Tensor,
    Hash,
    Encoded,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Family::Voxel => "voxel",
            Family::Tensor => "tensor",
            Family::Hash => "hash",
            Family::Encoded => "encoded",
        };
        f.write_str(s)
    }
}

/// Field family and shape parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldConfig {
    Voxel {
        resolution: [usize; 3],
        feature_dim: usize,
    },
    Tensor {
        resolution: [usize; 3],
        rank_density: usize,
        rank_color: usize,
        feature_dim: usize,
        #[serde(default = "default_sigma_max")]
        sigma_max: f64,
    },
    Hash {
        levels: usize,
        features_per_level: usize,
        log2_table: u32,
        base_resolution: usize,
        max_resolution: usize,
        #[serde(default)]
        s_near: f64,
        feature_dim: usize,
    },
    Encoded {
        degrees: usize,
        feature_dim: usize,
    },
}

fn default_sigma_max() -> f64 {
    tensor::DEFAULT_SIGMA_MAX
}

impl FieldConfig {
    pub fn family(&self) -> Family {
        match self {
            FieldConfig::Voxel { .. } => Family::Voxel,
            FieldConfig::Tensor { .. } => Family::Tensor,
            FieldConfig::Hash { .. } => Family::Hash,
            FieldConfig::Encoded { .. } => Family::Encoded,
        }
    }

    pub fn feature_dim(&self) -> usize {
        match *self {
            FieldConfig::Voxel { feature_dim, .. }
            | FieldConfig::Tensor { feature_dim, .. }
            | FieldConfig::Hash { feature_dim, .. }
            | FieldConfig::Encoded { feature_dim, .. } => feature_dim,
        }
    }
}

/// Everything needed to build a radiance model from scratch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub bbox: Aabb,
    pub field: FieldConfig,
    pub decoder: DecoderConfig,
    /// Added to the density pre-activation.
    #[serde(default)]
    pub density_shift: f64,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
}

fn default_hidden() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq)]
pub enum DensityField {
    Voxel(VoxelField),
    Tensor(TensorField),
    Hash(HashField),
    Encoded(EncodedField),
}

/// Whether a parameter block is a grid/table or network weights; the
/// optimizer may assign them different learning rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Grid,
    Network,
}

impl DensityField {
    pub fn build(bbox: Aabb, cfg: &FieldConfig, hidden: usize, shift: f64, rng: &mut impl Rng) -> Result<Self> {
        let mut f = match *cfg {
            FieldConfig::Voxel { resolution, feature_dim } => {
                DensityField::Voxel(VoxelField::new(bbox, resolution, feature_dim, rng)?)
            }
            FieldConfig::Tensor {
                resolution,
                rank_density,
                rank_color,
                feature_dim,
                sigma_max,
            } => {
                let mut t = TensorField::new(bbox, resolution, rank_density, rank_color, feature_dim, rng)?;
                t.sigma_max = sigma_max;
                DensityField::Tensor(t)
            }
            FieldConfig::Hash {
                levels,
                features_per_level,
                log2_table,
                base_resolution,
                max_resolution,
                s_near,
                feature_dim,
            } => DensityField::Hash(HashField::new(
                bbox,
                HashConfig {
                    levels,
                    features_per_level,
                    log2_table,
                    base_resolution,
                    max_resolution,
                    s_near,
                    feature_dim,
                    hidden,
                },
                rng,
            )?),
            FieldConfig::Encoded { degrees, feature_dim } => {
                DensityField::Encoded(EncodedField::new(bbox, degrees, feature_dim, hidden, rng))
            }
        };
        f.set_density_shift(shift);
        Ok(f)
    }

    pub fn family(&self) -> Family {
        match self {
            DensityField::Voxel(_) => Family::Voxel,
            DensityField::Tensor(_) => Family::Tensor,
            DensityField::Hash(_) => Family::Hash,
            DensityField::Encoded(_) => Family::Encoded,
        }
    }

    pub fn bbox(&self) -> &Aabb {
        match self {
            DensityField::Voxel(f) => &f.bbox,
            DensityField::Tensor(f) => &f.bbox,
            DensityField::Hash(f) => &f.bbox,
            DensityField::Encoded(f) => &f.bbox,
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            DensityField::Voxel(f) => f.feature_dim,
            DensityField::Tensor(f) => f.feature_dim,
            DensityField::Hash(f) => f.feature_dim,
            DensityField::Encoded(f) => f.feature_dim,
        }
    }

    fn set_density_shift(&mut self, s: f64) {
        match self {
            DensityField::Voxel(f) => f.density_shift = s,
            DensityField::Tensor(f) => f.density_shift = s,
            DensityField::Hash(f) => f.density_shift = s,
            DensityField::Encoded(f) => f.density_shift = s,
        }
    }

    /// Density and feature at `p`; `None` outside the box, where density is
    /// zero by convention.
    pub fn query(&self, p: &[f64; 3], cache: &mut Vec<f64>) -> Option<(f64, Vec<f64>)> {
        match self {
            DensityField::Voxel(f) => f.query(p),
            DensityField::Tensor(f) => f.query(p),
            DensityField::Hash(f) => f.query(p, cache),
            DensityField::Encoded(f) => f.query(p, cache),
        }
    }

    /// Adds parameter gradients into this field's blocks and the position
    /// gradient into `dp`.
    pub fn backward(
        &self,
        p: &[f64; 3],
        cache: &[f64],
        d_sigma: f64,
        d_feature: &[f64],
        grads: &mut [Vec<f64>],
        dp: &mut [f64; 3],
    ) {
        match self {
            DensityField::Voxel(f) => f.backward(p, d_sigma, d_feature, &mut grads[0], dp),
            DensityField::Tensor(f) => f.backward(p, d_sigma, d_feature, grads, dp),
            DensityField::Hash(f) => f.backward(p, cache, d_sigma, d_feature, grads, dp),
            DensityField::Encoded(f) => f.backward(p, cache, d_sigma, d_feature, &mut grads[0], dp),
        }
    }

    pub fn blocks(&self) -> Vec<(&'static str, BlockKind, &Vec<f64>)> {
        use BlockKind::*;
        match self {
            DensityField::Voxel(f) => vec![("voxel.grid", Grid, &f.params)],
            DensityField::Tensor(f) => vec![
                ("tensor.density", Grid, &f.density),
                ("tensor.color", Grid, &f.color),
                ("tensor.basis", Network, &f.basis),
            ],
            DensityField::Hash(f) => vec![("hash.tables", Grid, &f.tables), ("hash.mlp", Network, &f.mlp.params)],
            DensityField::Encoded(f) => vec![("encoded.mlp", Network, &f.mlp.params)],
        }
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut Vec<f64>> {
        match self {
            DensityField::Voxel(f) => vec![&mut f.params],
            DensityField::Tensor(f) => vec![&mut f.density, &mut f.color, &mut f.basis],
            DensityField::Hash(f) => vec![&mut f.tables, &mut f.mlp.params],
            DensityField::Encoded(f) => vec![&mut f.mlp.params],
        }
    }

    /// Lower sampling bound in normalized inverse depth, for fields sampled in
    /// that domain.
    pub fn s_near(&self) -> Option<f64> {
        match self {
            DensityField::Hash(f) => Some(f.s_near),
            _ => None,
        }
    }
}

/// Gradient buffers mirroring a model's parameter blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads(pub Vec<Vec<f64>>);

impl Grads {
    pub fn zeros_like(blocks: &[&Vec<f64>]) -> Self {
        Grads(blocks.iter().map(|b| vec![0.0; b.len()]).collect())
    }

    pub fn add(&mut self, other: &Grads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for b in &mut self.0 {
            for x in b {
                *x *= s;
            }
        }
    }

    pub fn clear(&mut self) {
        for b in &mut self.0 {
            b.iter_mut().for_each(|x| *x = 0.0);
        }
    }
}

/// Everything computed for one sample point; kept for the backward pass.
#[derive(Debug, Clone)]
pub struct SampleEval {
    pub inside: bool,
    pub sigma: f64,
    pub feature: Vec<f64>,
    pub rgb: [f64; 3],
    /// Predicted transmittance along the primary direction.
    pub vis: Option<f64>,
    /// Predicted transmittance along the secondary direction.
    pub vis_secondary: Option<f64>,
    field_cache: Vec<f64>,
    color_cache: Vec<f64>,
    vis_cache: Vec<f64>,
    vis2_cache: Vec<f64>,
}

/// Upstream gradients for one sample.
#[derive(Debug, Clone, Copy, Default)]
pub struct SampleGrad {
    pub sigma: f64,
    pub rgb: [f64; 3],
    pub vis: f64,
    pub vis_secondary: f64,
}

/// Density field plus color decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct RadianceModel {
    pub config: ModelConfig,
    pub field: DensityField,
    pub decoder: Decoder,
}

impl RadianceModel {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut dcfg = config.decoder.clone();
        dcfg.feature_dim = config.field.feature_dim();
        dcfg.hidden = config.hidden;
        if let Some((d1, d2)) = dcfg.residual_pe {
            if d1 >= d2 {
                return Err(Error::InvalidRange { d1, d2 });
            }
        }
        let field = DensityField::build(config.bbox, &config.field, config.hidden, config.density_shift, rng)?;
        let decoder = Decoder::new(dcfg.clone(), rng);
        let mut config = config;
        config.decoder = dcfg;
        Ok(Self { config, field, decoder })
    }

    pub fn family(&self) -> Family {
        self.field.family()
    }

    pub fn bbox(&self) -> &Aabb {
        self.field.bbox()
    }

    pub fn blocks(&self) -> Vec<(String, BlockKind, &Vec<f64>)> {
        let mut out: Vec<_> = self
            .field
            .blocks()
            .into_iter()
            .map(|(n, k, b)| (n.to_string(), k, b))
            .collect();
        out.push(("decoder.color".into(), BlockKind::Network, &self.decoder.color.params));
        if let Some(v) = &self.decoder.visibility {
            out.push(("decoder.visibility".into(), BlockKind::Network, &v.params));
        }
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = self.field.blocks_mut();
        out.push(&mut self.decoder.color.params);
        if let Some(v) = &mut self.decoder.visibility {
            out.push(&mut v.params);
        }
        out
    }

    pub fn zero_grads(&self) -> Grads {
        Grads::zeros_like(&self.blocks().iter().map(|b| b.2).collect::<Vec<_>>())
    }

    pub fn param_count(&self) -> usize {
        self.blocks().iter().map(|b| b.2.len()).sum()
    }

    /// Evaluates density, feature, color and (when the decoder has one) the
    /// visibility head at `p`. `time` is normalized to `[0, 1]`.
    pub fn eval(&self, p: &[f64; 3], view: &[f64; 3], time: f64, secondary: Option<&[f64; 3]>) -> SampleEval {
        let mut field_cache = Vec::new();
        let (inside, sigma, feature) = match self.field.query(p, &mut field_cache) {
            Some((s, h)) => (true, s, h),
            None => (false, 0.0, vec![0.0; self.field.feature_dim()]),
        };
        let inp = DecoderInput {
            feature: &feature,
            position: self.bbox().signed(p),
            view: *view,
            time,
        };
        let mut color_cache = Vec::new();
        let rgb = self.decoder.query_color(&inp, &mut color_cache);
        let mut vis_cache = Vec::new();
        let vis = self.decoder.query_visibility(&feature, view, &mut vis_cache);
        let mut vis2_cache = Vec::new();
        let vis_secondary = secondary.and_then(|v2| self.decoder.query_visibility(&feature, v2, &mut vis2_cache));
        SampleEval {
            inside,
            sigma,
            feature,
            rgb,
            vis,
            vis_secondary,
            field_cache,
            color_cache,
            vis_cache,
            vis2_cache,
        }
    }

    /// Backward through [`RadianceModel::eval`]; returns the gradient w.r.t.
    /// the world position `p`.
    pub fn backward(
        &self,
        p: &[f64; 3],
        view: &[f64; 3],
        time: f64,
        ev: &SampleEval,
        g: &SampleGrad,
        grads: &mut Grads,
    ) -> [f64; 3] {
        let nf = self.field.blocks().len();
        let (gf, gdec) = grads.0.split_at_mut(nf);
        let mut dh = vec![0.0; ev.feature.len()];
        let mut dpos = [0.0; 3];
        let inp = DecoderInput {
            feature: &ev.feature,
            position: self.bbox().signed(p),
            view: *view,
            time,
        };
        if g.rgb.iter().any(|&x| x != 0.0) {
            self.decoder
                .color_backward(&inp, &ev.color_cache, &ev.rgb, &g.rgb, &mut gdec[0], &mut dh, &mut dpos);
        }
        if let Some(t) = ev.vis {
            if g.vis != 0.0 {
                self.decoder.visibility_backward(&ev.vis_cache, t, g.vis, &mut gdec[1], &mut dh);
            }
        }
        if let Some(t) = ev.vis_secondary {
            if g.vis_secondary != 0.0 {
                self.decoder
                    .visibility_backward(&ev.vis2_cache, t, g.vis_secondary, &mut gdec[1], &mut dh);
            }
        }
        let e = self.bbox().extent();
        let mut dp = [0, 1, 2].map(|a| dpos[a] * 2.0 / e[a]);
        if ev.inside {
            self.field.backward(p, &ev.field_cache, g.sigma, &dh, gf, &mut dp);
        }
        dp
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    Smoothing,
    Lambertian,
    TensorSimple,
    HashSimple,
}

impl fmt::Display for AugmentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            AugmentKind::Smoothing => "smoothing",
            AugmentKind::Lambertian => "lambertian",
            AugmentKind::TensorSimple => "tensor_simple",
            AugmentKind::HashSimple => "hash_simple",
        };
        f.write_str(s)
    }
}

/// Capacity-reduction settings for the augmented models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSettings {
    /// Highest position frequency kept in the density network (`l_p^s`).
    pub smooth_degrees: usize,
    /// Density rank multiplier (`R_sigma^s / R_sigma`).
    pub rank_factor: f64,
    /// Per-axis resolution multiplier (cube root of `N_vox^s / N_vox`).
    pub resolution_factor: f64,
    /// Raise of the near box face as a fraction of the box depth.
    pub near_raise: f64,
    /// Table size of the reduced hash grid (`log2 T^s`).
    pub hash_log2_table: u32,
    pub s_near: f64,
}

impl Default for AugmentSettings {
    fn default() -> Self {
        Self {
            smooth_degrees: 3,
            rank_factor: 0.5,
            resolution_factor: 0.25,
            near_raise: 0.25,
            hash_log2_table: 8,
            s_near: 0.3,
        }
    }
}

/// Configuration of the reduced-capacity companion of `base`.
pub fn augment_config(base: &ModelConfig, kind: AugmentKind, s: &AugmentSettings) -> Result<ModelConfig> {
    let incompatible = || Error::IncompatibleKind {
        kind: kind.to_string(),
        family: base.field.family().to_string(),
    };
    let mut cfg = base.clone();
    match kind {
        AugmentKind::Lambertian => cfg.decoder.view_dependent = false,
        AugmentKind::Smoothing => {
            let FieldConfig::Encoded { degrees, .. } = &mut cfg.field else {
                return Err(incompatible());
            };
            let full = *degrees;
            if s.smooth_degrees >= full {
                return Err(Error::InvalidRange { d1: s.smooth_degrees, d2: full });
            }
            *degrees = s.smooth_degrees;
            cfg.decoder.residual_pe = Some((s.smooth_degrees, full));
        }
        AugmentKind::TensorSimple => {
            let FieldConfig::Tensor { resolution, rank_density, .. } = &mut cfg.field else {
                return Err(incompatible());
            };
            *rank_density = ((*rank_density as f64 * s.rank_factor).round() as usize).max(1);
            *resolution = resolution.map(|n| ((n as f64 * s.resolution_factor).round() as usize).max(2));
            let depth = cfg.bbox.max[2] - cfg.bbox.min[2];
            cfg.bbox.min[2] += s.near_raise * depth;
        }
        AugmentKind::HashSimple => {
            let FieldConfig::Hash { log2_table, s_near, .. } = &mut cfg.field else {
                return Err(incompatible());
            };
            *log2_table = s.hash_log2_table.min(*log2_table);
            *s_near = s.s_near;
        }
    }
    Ok(cfg)
}

/// Fresh, independently initialized reduced-capacity model.
pub fn make_augmented(
    base: &RadianceModel,
    kind: AugmentKind,
    settings: &AugmentSettings,
    rng: &mut impl Rng,
) -> Result<RadianceModel> {
    RadianceModel::new(augment_config(&base.config, kind, settings)?, rng)
}
