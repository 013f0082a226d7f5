use std::path::Path;

use anyhow::Context;
use planesplat::fit::FitConfig;
use planesplat::merge::MergeThresholds;
use planesplat::metrics::DEFAULT_FSCORE_TAU;
use serde::Deserialize;

/// Settings shared by the subcommands, read from `--config`.
#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Fitting schedule, loss weights, render parameters and `g_th`.
    pub fit: FitConfig,
    pub merge: MergeThresholds,
    pub fscore_tau: f64,
    /// Points per square metre sampled on merged planes.
    pub sample_density: f64,
    /// Pixel stride when back-projecting depth maps into point clouds.
    pub depth_stride: usize,
    pub seed: u64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            fit: FitConfig::default(),
            merge: MergeThresholds::default(),
            fscore_tau: DEFAULT_FSCORE_TAU,
            sample_density: 2500.0,
            depth_stride: 2,
            seed: 0,
        }
    }
}

pub fn load(path: Option<&Path>) -> anyhow::Result<Config> {
    let Some(path) = path else {
        return Ok(Config::default());
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let cfg: Config = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    cfg.fit.validate()?;
    cfg.merge.validate()?;
    if cfg.depth_stride == 0 {
        anyhow::bail!("depth_stride must be positive");
    }
    Ok(cfg)
}
