//! Scene description read by `gen-scene`: either a full scene or one of the
//! built-in presets, plus how many oracle keypoints to attach.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Deserialize;
use sparseview::priors::sparse::{oracle_flow_set, oracle_sparse_depth};
use sparseview::scenes::io::Dataset;
use sparseview::scenes::presets::{moving_sprite, occluder_scene, toy_layout, SpriteConfig};
use sparseview::scenes::SceneSpec;

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Preset {
    Occluder { seed: u64, width: usize, height: usize },
    Toy { width: usize, height: usize, offsets: Vec<f64> },
    Sprite(SpriteConfig),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    pub scene: Option<SceneSpec>,
    pub preset: Option<Preset>,
    /// Keypoint depths per view and frame.
    #[serde(default)]
    pub sparse_depth: usize,
    /// Matches per (frame, view) pair.
    #[serde(default)]
    pub sparse_flow: usize,
    #[serde(default = "one")]
    pub flow_delta: usize,
    /// Uniform keypoint noise in pixels.
    #[serde(default)]
    pub noise: f64,
}

fn one() -> usize {
    1
}

impl SceneFile {
    /// Reads TOML when the extension says so, JSON otherwise.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading scene file {}", path.display()))?;
        let parsed = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| anyhow::anyhow!(e.message().to_string()))
        } else {
            serde_json::from_str(&text).map_err(anyhow::Error::from)
        };
        parsed.with_context(|| format!("parsing scene file {}", path.display()))
    }

    pub fn spec(&self) -> Result<SceneSpec> {
        match (&self.scene, &self.preset) {
            (Some(s), None) => Ok(s.clone()),
            (None, Some(p)) => Ok(match p {
                Preset::Occluder { seed, width, height } => occluder_scene(*seed, *width, *height),
                Preset::Toy { width, height, offsets } => toy_layout(*width, *height, offsets),
                Preset::Sprite(c) => moving_sprite(c),
            }),
            _ => bail!("scene file needs exactly one of `scene` and `preset`"),
        }
    }

    /// Renders the scene and attaches oracle keypoints.
    pub fn dataset(&self, seed: u64) -> Result<Dataset> {
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            bail!("keypoint noise must be finite and non-negative");
        }
        let spec = self.spec()?;
        let mut ds = Dataset::from_spec(&spec)?;
        let views: Vec<usize> = (0..spec.views()).collect();
        for t in 0..spec.frames {
            ds.sparse_depth.extend(oracle_sparse_depth(&spec, &views, t, self.sparse_depth, self.noise, seed));
        }
        if self.sparse_flow > 0 && spec.frames > 1 {
            ds.sparse_flow = oracle_flow_set(&spec, self.flow_delta, self.sparse_flow, self.noise, seed);
        }
        Ok(ds)
    }
}
