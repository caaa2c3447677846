//! Self-describing JSON checkpoints: architecture, class names, seed and
//! every named array. `f32` values round-trip exactly through JSON.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{ModelConfig, SegmentationModel};
use super::train::{TrainConfig, TrainHistory};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "medood-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub model: ModelConfig,
    pub classes: Vec<String>,
    pub seed: u64,
    pub train: Option<TrainConfig>,
    pub history: Option<TrainHistory>,
    pub arrays: BTreeMap<String, Vec<f32>>,
}

impl Checkpoint {
    pub fn from_model(
        model: &SegmentationModel,
        classes: &[String],
        seed: u64,
        train: Option<&TrainConfig>,
        history: Option<&TrainHistory>,
    ) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            model: model.config.clone(),
            classes: classes.to_vec(),
            seed,
            train: train.cloned(),
            history: history.cloned(),
            arrays: model.named_arrays().into_iter().collect(),
        }
    }

    pub fn build_model(&self) -> Result<SegmentationModel> {
        if self.classes.len() != self.model.classes {
            return Err(Error::Shape(format!(
                "checkpoint names {} classes, architecture has {}",
                self.classes.len(),
                self.model.classes
            )));
        }
        let mut model = SegmentationModel::new(self.model.clone(), self.seed)?;
        model.load_named_arrays(&self.arrays)?;
        Ok(model)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string(ckpt).map_err(|e| Error::format(path, e))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::format(path, e))?;
    if ckpt.format != CHECKPOINT_FORMAT {
        return Err(Error::format(path, format!("unsupported checkpoint format {:?}", ckpt.format)));
    }
    Ok(ckpt)
}
