//! The run configuration file: a TOML document with `[train]`,
//! `[synthetic]`, `[gradcheck]` and `[paths]` tables. Every table is
//! optional and every key defaults; unknown keys are rejected.
//!
//! ```toml
//! [train]
//! preset = "supplementary"   # alpha/beta follow the preset unless set
//! outer_iterations = 50
//!
//! [synthetic]
//! seed = 3
//!
//! [paths]
//! data = "data/manifest.json"
//! out = "runs/a"
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use apivr::data::SyntheticConfig;
use apivr::training::{GradCheckOptions, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    pub train: TrainConfig,
    pub synthetic: SyntheticConfig,
    pub gradcheck: GradCheckSection,
    pub paths: Paths,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

/// Gradient-check settings; the model and data come from `[train]` and
/// `[synthetic]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckSection {
    /// Pairs in the checked batch.
    pub batch_size: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates probed per (loss, group); 0 probes all of them.
    pub coordinates: usize,
    pub seed: u64,
}

impl Default for GradCheckSection {
    fn default() -> Self {
        let o = GradCheckOptions::default();
        GradCheckSection {
            batch_size: 6,
            step: o.step,
            tolerance: o.tolerance,
            coordinates: o.coordinates,
            seed: o.seed,
        }
    }
}

impl GradCheckSection {
    pub fn options(&self) -> GradCheckOptions {
        GradCheckOptions {
            step: self.step,
            tolerance: self.tolerance,
            coordinates: self.coordinates,
            seed: self.seed,
        }
    }
}

impl RunConfigFile {
    /// Parses a document. `origin` only labels error messages.
    pub fn parse(text: &str, origin: &Path) -> Result<Self, CliError> {
        let config_err = |message: String| CliError::Config {
            path: origin.to_path_buf(),
            message,
        };
        let raw: toml::Table = toml::from_str(text).map_err(|e| config_err(e.message().to_string()))?;
        let mut cfg: RunConfigFile = toml::from_str(text).map_err(|e| config_err(e.message().to_string()))?;

        let train = raw.get("train").and_then(|t| t.as_table());
        let explicit = |key: &str| train.is_some_and(|t| t.contains_key(key));
        let (alpha, beta) = cfg.train.preset.coefficients();
        if !explicit("alpha") {
            cfg.train.alpha = alpha;
        }
        if !explicit("beta") {
            cfg.train.beta = beta;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::parse(&text, path)
    }

    /// Loads `path`, or the defaults when no file is given.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self, CliError> {
        path.map_or_else(|| Ok(RunConfigFile::default()), RunConfigFile::load)
    }

    /// Checks every section that does not need a dataset.
    pub fn validate(&self) -> Result<(), CliError> {
        self.train.validate()?;
        self.synthetic.validate()?;
        if self.gradcheck.batch_size < 2 {
            return Err(apivr::Error::InvalidConfig(format!(
                "gradcheck.batch_size must be >= 2, got {}",
                self.gradcheck.batch_size
            ))
            .into());
        }
        Ok(())
    }
}
