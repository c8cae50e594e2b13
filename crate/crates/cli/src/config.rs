//! Run configuration file. Every key is optional; values present here take
//! precedence over command-line flags, which take precedence over defaults.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sparseview::fields::ModelConfig;
use sparseview::gradcheck::GradcheckConfig;
use sparseview::mpi::TvsConfig;
use sparseview::optim::{DynamicFitConfig, StaticFitConfig};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub vis_prior: VisPriorSection,
    #[serde(default)]
    pub fit: FitSection,
    #[serde(default)]
    pub render: RenderSection,
    #[serde(default)]
    pub tvs: TvsSection,
    #[serde(default)]
    pub eval: EvalSection,
    pub gradcheck: Option<GradcheckConfig>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisPriorSection {
    pub primary: Option<usize>,
    pub secondary: Option<usize>,
    pub planes: Option<usize>,
    pub gamma: Option<f64>,
    pub frame: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum FitMode {
    Static,
    Dynamic,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSection {
    pub mode: Option<FitMode>,
    /// Training views; all views of the dataset when absent.
    pub views: Option<Vec<usize>>,
    /// Frame used by static fits.
    pub frame: Option<usize>,
    pub model: Option<ModelConfig>,
    #[serde(rename = "static")]
    pub static_fit: Option<StaticFitConfig>,
    pub dynamic: Option<DynamicFitConfig>,
    /// Plane count and gamma of the visibility priors built for static fits.
    pub prior_planes: Option<usize>,
    pub prior_gamma: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderSection {
    pub samples: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TvsSection {
    pub k: Option<usize>,
    pub frame: Option<usize>,
    pub view: Option<usize>,
    pub bounds: Option<Vec<String>>,
    pub mpi: Option<TvsConfig>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub mask: Option<String>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        // toml errors span several lines; keep the first for a one-line diagnostic
        toml::from_str(text).map_err(|e| anyhow::anyhow!(e.message().to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_default() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("sede = 3").is_err());
        assert!(RunConfig::parse("[fit]\nmodes = \"static\"").is_err());
        assert!(RunConfig::parse("[fit.static]\niterations = 3").is_err());
    }

    #[test]
    fn nested_sections_parse() {
        let c = RunConfig::parse(
            r#"
seed = 7
[fit]
mode = "static"
views = [0, 1]
[fit.static]
iters = 12
batch = 32
[fit.static.weights]
photometric = 1.0
sparse_depth = 0.1
[tvs]
k = 2
bounds = ["predicted", "gt-flow,gt-infill"]
[tvs.mpi]
planes = 4
"#,
        )
        .unwrap();
        assert_eq!(c.seed, Some(7));
        assert_eq!(c.fit.mode, Some(FitMode::Static));
        let s = c.fit.static_fit.unwrap();
        assert_eq!((s.iters, s.batch), (12, 32));
        assert_eq!(s.weights.sparse_depth, 0.1);
        assert_eq!(c.tvs.mpi.unwrap().planes, 4);
    }
}
