use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autoencoder::AEConfig;
use crate::diffusion::LdmConfig;
use crate::harness::HarnessError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub n: usize,
    /// Raw property values, one per conditioning key.
    pub condition: Option<Vec<f64>>,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { n: 100, condition: None }
    }
}

/// TOML run description. Relative paths resolve against the file's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: PathBuf,
    pub validation: Option<PathBuf>,
    /// Keep only molecules the evaluator marks stable (applied before `limit`).
    pub stable_only: bool,
    /// Use the first `limit` molecules.
    pub limit: Option<usize>,
    /// Metadata keys used as conditioning properties.
    pub conditioning: Vec<String>,
    /// Stop autoencoder training once validation RMSD drops below this
    /// with perfect type accuracy.
    pub stop_rmsd: Option<f64>,
    pub autoencoder: AEConfig,
    pub diffusion: LdmConfig,
    pub sample: SampleConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: PathBuf::from("data/qm9_subset.txt"),
            validation: None,
            stable_only: false,
            limit: None,
            conditioning: Vec::new(),
            stop_rmsd: None,
            autoencoder: AEConfig::default(),
            diffusion: LdmConfig::default(),
            sample: SampleConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base)
    }

    /// Parse, resolve paths against `base` and validate.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self, HarnessError> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        cfg.dataset = resolve(&cfg.dataset);
        cfg.validation = cfg.validation.as_deref().map(resolve);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        for p in std::iter::once(&self.dataset).chain(self.validation.iter()) {
            if !p.is_file() {
                return Err(HarnessError::Config(format!("dataset {} does not exist", p.display())));
            }
        }
        if self.limit == Some(0) {
            return Err(HarnessError::Config("limit must be positive".into()));
        }
        self.autoencoder
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        self.diffusion
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }
}
