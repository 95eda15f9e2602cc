//! Command-line orchestration: one JSON run configuration, one output
//! directory per command, seeded end to end.

mod commands;
pub mod gradcheck;
pub mod pipeline;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use commands::{
    config_hash, exit_code, main_with_args, run_command, Command, Invocation, RunMeta, CONFIG_FILE, DEFAULT_OUT,
    RUN_META_FILE,
};

use crate::connectome::WindowSpec;
use crate::contrastive::ContrastiveConfig;
use crate::detector::DetectorConfig;
use crate::diffcore::SgdConfig;
use crate::error::{Error, Result};
use crate::evaluation::ClassifierConfig;
use crate::sgtmodel::SgtConfig;
use crate::synthcohort::GeneratorConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    /// Share of each group used for training (the rest is the test split).
    pub train_fraction: f64,
    /// Gradient-descent iterations of the group classifier.
    pub iterations: usize,
    pub optimizer: SgdConfig,
    /// Label-shuffled classifier fits for the chance baseline.
    pub shuffle_repeats: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        let classifier = ClassifierConfig::default();
        Self {
            train_fraction: classifier.train_fraction,
            iterations: classifier.iterations,
            optimizer: classifier.optimizer,
            shuffle_repeats: 20,
        }
    }
}

impl EvaluationConfig {
    pub fn classifier(&self) -> ClassifierConfig {
        ClassifierConfig {
            train_fraction: self.train_fraction,
            iterations: self.iterations,
            optimizer: self.optimizer,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoConfig {
    /// Output root; the `--out` flag and `CIRCUITSCOPE_OUT` take precedence.
    pub out: Option<PathBuf>,
    /// Existing cohort directory to use instead of synthesizing one.
    pub cohort: Option<PathBuf>,
    /// Worker threads for per-subject work; defaults to all cores.
    pub workers: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub synthcohort: GeneratorConfig,
    pub connectome: WindowSpec,
    pub model: SgtConfig,
    pub contrastive: ContrastiveConfig,
    pub detector: DetectorConfig,
    pub evaluation: EvaluationConfig,
    pub io: IoConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            synthcohort: GeneratorConfig::default(),
            connectome: WindowSpec::default(),
            model: SgtConfig::default(),
            contrastive: ContrastiveConfig::default(),
            detector: DetectorConfig::default(),
            evaluation: EvaluationConfig::default(),
            io: IoConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::parse("run config", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Parse { message, .. } => Error::parse(path.display().to_string(), message),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Checks every section before any work starts.
    pub fn validate(&self) -> Result<()> {
        if self.io.cohort.is_none() {
            self.synthcohort.validate()?;
            self.connectome.check_scans(self.synthcohort.scans)?;
        }
        self.connectome.validate()?;
        self.model.validate()?;
        self.contrastive.validate()?;
        self.detector.validate()?;
        self.evaluation.classifier().validate()?;
        if self.io.workers == Some(0) {
            return Err(Error::Validation("io.workers must be ≥ 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
