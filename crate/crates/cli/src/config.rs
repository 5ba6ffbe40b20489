//! Experiment configuration files (TOML, strict).

use std::path::{Path, PathBuf};

use overlap_wishart::ensemble::{EnsembleError, ExperimentGeometry, ObservableSpec};
use overlap_wishart::entry_process::{EntryProcessSpec, ProcessError, ProcessFamily, ScalarField, TimeGrid};
use overlap_wishart::montecarlo::{CheckpointOptions, McConfig, Workers};
use overlap_wishart::theory::QuadratureOptions;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid experiment: {0}")]
    Process(#[from] ProcessError),
    #[error("invalid experiment: {0}")]
    Geometry(#[from] EnsembleError),
    #[error("invalid experiment: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointSection {
    pub path: PathBuf,
    pub every_batches: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McSection {
    pub replicas: u64,
    pub seed: u64,
    #[serde(default)]
    pub workers: Workers,
    pub batch_size: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<CheckpointSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadratureSection {
    /// Also evaluate the direct quadrature in `theory`.
    #[serde(default)]
    pub enabled: bool,
    #[serde(default = "default_abs_tol")]
    pub abs_tol: f64,
    #[serde(default = "default_max_refinements")]
    pub max_refinements: usize,
}

fn default_abs_tol() -> f64 {
    QuadratureOptions::default().abs_tol
}

fn default_max_refinements() -> usize {
    QuadratureOptions::default().max_refinements
}

impl Default for QuadratureSection {
    fn default() -> Self {
        Self {
            enabled: false,
            abs_tol: default_abs_tol(),
            max_refinements: default_max_refinements(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub format: OutputFormat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidateSection {
    #[serde(default = "default_draws")]
    pub draws: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_draws() -> usize {
    1_000_000
}

impl Default for ValidateSection {
    fn default() -> Self {
        Self {
            draws: default_draws(),
            seed: 0,
        }
    }
}

/// Whole experiment file. Extents and offsets are in units of `scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scale: usize,
    pub beta: u32,
    pub times: Vec<f64>,
    pub process: ProcessFamily,
    pub observables: Vec<ObservableSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mc: Option<McSection>,
    #[serde(default)]
    pub quadrature: QuadratureSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub validate: ValidateSection,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, path)
    }

    /// Parses and validates. Unknown keys are errors.
    pub fn parse(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.geometry()?;
        if let Some(mc) = &cfg.mc {
            cfg.mc_config(mc).validate().map_err(|e| ConfigError::Invalid(format!("[mc] {e}")))?;
            if mc.seed > i64::MAX as u64 {
                return Err(ConfigError::Invalid("[mc] seed must fit in a signed 64-bit integer".into()));
            }
        }
        if !(cfg.quadrature.abs_tol.is_finite() && cfg.quadrature.abs_tol > 0.0) {
            return Err(ConfigError::Invalid("[quadrature] abs_tol must be positive".into()));
        }
        Ok(cfg)
    }

    pub fn field(&self) -> Result<ScalarField, ConfigError> {
        Ok(ScalarField::from_beta(self.beta)?)
    }

    pub fn process_spec(&self) -> Result<EntryProcessSpec, ConfigError> {
        Ok(EntryProcessSpec::new(self.field()?, self.process)?)
    }

    pub fn grid(&self) -> Result<TimeGrid, ConfigError> {
        Ok(TimeGrid::new(self.times.clone())?)
    }

    pub fn geometry(&self) -> Result<ExperimentGeometry, ConfigError> {
        Ok(ExperimentGeometry::new(
            self.scale,
            self.grid()?,
            self.process_spec()?,
            self.observables.clone(),
        )?)
    }

    fn mc_config(&self, mc: &McSection) -> McConfig {
        McConfig {
            replicas: mc.replicas,
            seed: mc.seed,
            workers: mc.workers,
            batch_size: mc.batch_size,
        }
    }

    pub fn mc(&self) -> Result<(McConfig, Option<CheckpointOptions>), ConfigError> {
        let mc = self
            .mc
            .as_ref()
            .ok_or_else(|| ConfigError::Invalid("this command needs an [mc] section".into()))?;
        let checkpoint = mc.checkpoint.as_ref().map(|c| CheckpointOptions {
            path: c.path.clone(),
            every_batches: c.every_batches,
        });
        Ok((self.mc_config(mc), checkpoint))
    }

    pub fn quadrature_options(&self) -> QuadratureOptions {
        QuadratureOptions {
            abs_tol: self.quadrature.abs_tol,
            max_refinements: self.quadrature.max_refinements,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises to TOML")
    }

    /// Digest of the effective experiment, independent of formatting.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serialises to JSON");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}
