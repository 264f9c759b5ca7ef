use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{EstimatorConfig, EstimatorKind};
use crate::sim::ScenarioConfig;

/// One experiment: where the data comes from, which estimators run and
/// where results go.
///
/// ```toml
/// estimators = ["l2", "dcs", "mm", "ice"]
/// out = "bench-out"
///
/// [scenario]
/// epochs = 500
/// seed = 7
///
/// [scenario.contamination]
/// epsilon = 0.2
/// k = 100.0
///
/// [estimator.adaptation]
/// z_threshold = 3.0
/// buffer_threshold = 1000
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    /// Replay this dataset instead of generating one.
    pub dataset: Option<PathBuf>,
    pub scenario: ScenarioConfig,
    pub estimators: Vec<EstimatorKind>,
    pub estimator: EstimatorConfig,
    pub out: PathBuf,
    /// Run estimators on separate threads.
    pub parallel: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            scenario: ScenarioConfig::default(),
            estimators: EstimatorKind::ALL.to_vec(),
            estimator: EstimatorConfig::default(),
            out: PathBuf::from("bench-out"),
            parallel: true,
        }
    }
}

impl BenchConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file. A relative `dataset` path is resolved against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config =
            Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let (Some(d), Some(dir)) = (&config.dataset, path.parent()) {
            if d.is_relative() {
                config.dataset = Some(dir.join(d));
            }
        }
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.estimators.is_empty() {
            return Err(Error::Config("no estimators configured".into()));
        }
        let mut seen = self.estimators.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.estimators.len() {
            return Err(Error::Config("estimator listed twice".into()));
        }
        Ok(())
    }
}

/// Parses `l2,dcs,mm,ice`.
pub fn parse_estimator_list(s: &str) -> Result<Vec<EstimatorKind>> {
    s.split(',').filter(|p| !p.trim().is_empty()).map(str::parse).collect()
}
