use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::balance::BalanceConfig;
use crate::dataset::DEFAULT_PATCH_SIZE;
use crate::error::{Error, Result};
use crate::ood::RemovalKind;
use crate::segtrain::{TrainConfig, DEFAULT_THRESHOLD};
use crate::synth::SynthConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OodConfig {
    pub strategy: RemovalKind,
    /// Probability threshold used when scoring candidates.
    pub threshold: f64,
}

impl Default for OodConfig {
    fn default() -> Self {
        Self {
            strategy: RemovalKind::NearestInpaint,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

/// Optional extra training runs per fold.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Train on every mined OoD patch alone.
    pub ood_only: bool,
    /// Repeat baseline and med-ood without batch normalization.
    pub no_batchnorm: bool,
    /// Train on the ID set plus every mined OoD patch.
    pub full_ood: bool,
    /// OoD percentages to train and evaluate, one model each.
    pub sweep: Vec<f64>,
    /// Number of test patches rendered as overlays.
    pub overlays: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Drives every seeded stage; stage seeds are derived from it.
    pub seed: u64,
    /// Region directory to ingest. Synthetic regions are generated when unset.
    pub regions: Option<PathBuf>,
    pub patch_size: usize,
    pub folds: usize,
    /// Folds to run; empty means all.
    pub run_folds: Vec<usize>,
    pub synth: SynthConfig,
    pub balance: BalanceConfig,
    pub train: TrainConfig,
    pub ood: OodConfig,
    pub experiments: ExperimentConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            regions: None,
            patch_size: DEFAULT_PATCH_SIZE,
            folds: 3,
            run_folds: Vec::new(),
            synth: SynthConfig::default(),
            balance: BalanceConfig::default(),
            train: TrainConfig::default(),
            ood: OodConfig::default(),
            experiments: ExperimentConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidArgument(format!("config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::format(path, e))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidArgument(format!("config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(4) {
            return bad(format!("patch size must be a positive multiple of 4, got {}", self.patch_size));
        }
        if self.folds < 2 {
            return bad(format!("need at least 2 folds, got {}", self.folds));
        }
        if let Some(f) = self.run_folds.iter().find(|&&f| f >= self.folds) {
            return bad(format!("fold {f} out of range for {} folds", self.folds));
        }
        if !(self.ood.threshold > 0.0 && self.ood.threshold < 1.0) {
            return bad(format!("OoD threshold must lie in (0, 1), got {}", self.ood.threshold));
        }
        if let Some(v) = self.experiments.sweep.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return bad(format!("sweep percentage {v} outside [0, 1]"));
        }
        if self.regions.is_none() {
            self.synth.validate()?;
        }
        self.balance.validate()?;
        self.train.validate()
    }

    pub fn folds_to_run(&self) -> Vec<usize> {
        if self.run_folds.is_empty() {
            (0..self.folds).collect()
        } else {
            let mut f = self.run_folds.clone();
            f.sort_unstable();
            f.dedup();
            f
        }
    }
}
