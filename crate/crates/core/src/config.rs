//! Run configuration read from a single TOML file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::basis::BasisConfig;
use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::inference::SignificanceRule;
use crate::lifetable::LifeTableConventions;
use crate::penalty::PenaltyConfig;
use crate::simulate::Scenario;
use crate::solver::IrwlsControls;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    pub deaths: PathBuf,
    pub exposures: PathBuf,
    pub centroids: PathBuf,
    pub sex: String,
}

impl Default for DataPaths {
    fn default() -> Self {
        DataPaths {
            deaths: "deaths.csv".into(),
            exposures: "exposures.csv".into(),
            centroids: "centroids.csv".into(),
            sex: "f".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapConfig {
    pub draws: usize,
    pub seed: u64,
    pub level: f64,
    pub rule: SignificanceRule,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            draws: 1000,
            seed: 1,
            level: 0.95,
            rule: SignificanceRule::Overlap,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub artifact: String,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: "out".into(),
            artifact: "model.msrf".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Threads for grid points, bootstrap draws and per-area work.
    #[serde(default = "one")]
    pub workers: usize,
    #[serde(default)]
    pub data: DataPaths,
    #[serde(default)]
    pub basis: BasisConfig,
    pub penalty: Option<PenaltyConfig>,
    pub grid: Option<GridSpec>,
    #[serde(default)]
    pub controls: IrwlsControls,
    #[serde(default)]
    pub bootstrap: BootstrapConfig,
    #[serde(default)]
    pub lifetable: LifeTableConventions,
    #[serde(default)]
    pub output: OutputConfig,
    pub scenario: Option<Scenario>,
}

fn one() -> usize {
    1
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            workers: 1,
            data: DataPaths::default(),
            basis: BasisConfig::default(),
            penalty: None,
            grid: None,
            controls: IrwlsControls::default(),
            bootstrap: BootstrapConfig::default(),
            lifetable: LifeTableConventions::default(),
            output: OutputConfig::default(),
            scenario: None,
        }
    }
}

/// A parsed config and the directory its relative paths refer to.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// First 16 hex digits of the SHA-256 of the serialized config.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
    }
}

impl LoadedConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config = RunConfig::from_toml(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(LoadedConfig { config, base_dir })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.config.output.dir)
    }

    pub fn artifact_path(&self) -> PathBuf {
        self.output_dir().join(&self.config.output.artifact)
    }
}
