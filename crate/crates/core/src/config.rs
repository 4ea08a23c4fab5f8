//! Pipeline configuration: one TOML file covering the grid, target
//! generation, fusion, augmentation and evaluation.
//!
//! `Config::resolve` accepts a preset name (`semantickitti`, `nuscenes`),
//! a path to a TOML file, or the stem of a file in the directory named by
//! `POLARPAN_CONFIG_DIR`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentParams;
use crate::error::{Error, Result};
use crate::fusion::FusionParams;
use crate::grid::PolarGridConfig;
use crate::metrics::MetricParams;
use crate::targets::TargetParams;

pub const CONFIG_DIR_ENV: &str = "POLARPAN_CONFIG_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub grid: PolarGridConfig,
    #[serde(default)]
    pub targets: TargetParams,
    #[serde(default)]
    pub fusion: FusionParams,
    #[serde(default)]
    pub augment: AugmentParams,
    #[serde(default)]
    pub metrics: MetricParams,
}

impl Default for Config {
    fn default() -> Self {
        Self::semantic_kitti()
    }
}

impl Config {
    pub fn semantic_kitti() -> Self {
        Self {
            grid: PolarGridConfig::semantic_kitti(),
            targets: TargetParams::default(),
            fusion: FusionParams::default(),
            augment: AugmentParams::default(),
            metrics: MetricParams::default(),
        }
    }

    pub fn nuscenes() -> Self {
        Self {
            grid: PolarGridConfig::nuscenes(),
            ..Self::semantic_kitti()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "semantickitti" | "semantic_kitti" | "kitti" => Some(Self::semantic_kitti()),
            "nuscenes" => Some(Self::nuscenes()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.fusion.validate()?;
        self.augment.validate()?;
        if !(self.targets.sigma > 0.0 && self.targets.sigma.is_finite()) {
            return Err(Error::Config(format!(
                "targets.sigma must be > 0, got {}",
                self.targets.sigma
            )));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Preset name, then an existing path, then `<name>.toml` under
    /// `POLARPAN_CONFIG_DIR`.
    pub fn resolve(spec: &str) -> Result<Self> {
        if let Some(cfg) = Self::preset(spec) {
            return Ok(cfg);
        }
        let direct = PathBuf::from(spec);
        if direct.exists() {
            return Self::load(&direct);
        }
        if let Some(dir) = std::env::var_os(CONFIG_DIR_ENV) {
            let dir = PathBuf::from(dir);
            for candidate in [dir.join(spec), dir.join(format!("{spec}.toml"))] {
                if candidate.exists() {
                    return Self::load(&candidate);
                }
            }
        }
        Err(Error::Config(format!(
            "{spec:?} is neither a preset, a file, nor found under ${CONFIG_DIR_ENV}"
        )))
    }
}

/// Fusion parameters from a TOML file holding either a bare table of
/// `FusionParams` fields or a full config with a `[fusion]` section.
pub fn load_fusion_params(path: &Path) -> Result<FusionParams> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let bad = |e: toml::de::Error| Error::Config(format!("{}: {e}", path.display()));
    let table: toml::Table = toml::from_str(&text).map_err(bad)?;
    let params: FusionParams = if table.contains_key("grid") {
        Config::from_toml(&text)?.fusion
    } else {
        toml::from_str(&text).map_err(bad)?
    };
    params.validate()?;
    Ok(params)
}
