//! Segmentation model, loss and training loops.

pub mod checkpoint;
pub mod loss;
pub mod model;
pub mod nn;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use loss::{combine_role_losses, dice_loss, dice_loss_grad, seg_loss, seg_loss_grad, LossSample, SegLossConfig};
pub use model::{ModelConfig, SegmentationModel};
pub use train::{train, train_model, TrainConfig, TrainHistory, TrainMode};

use crate::dataset::Patch;
use crate::error::{Error, Result};
use crate::metrics::BinaryMasks;
use nn::Tensor;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Batch size used for inference over many patches.
const INFER_BATCH: usize = 16;

/// Per-class probability planes, class-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMaps {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl ProbMaps {
    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }
}

/// `prob > tau`, each class independently.
pub fn threshold(probs: &ProbMaps, tau: f64) -> BinaryMasks {
    let data = probs.data.iter().map(|&p| p as f64 > tau).collect();
    BinaryMasks::new(probs.classes, probs.height, probs.width, data).expect("shape carried over from probabilities")
}

/// Stacks patch images into a `[3][N][P][P]` tensor scaled to `[-1, 1]`.
pub(crate) fn images_to_tensor(patches: &[&Patch], patch_size: usize) -> Result<Tensor> {
    let n = patches.len();
    let plane = patch_size * patch_size;
    let mut t = Tensor::zeros(3, n, patch_size, patch_size);
    for (s, p) in patches.iter().enumerate() {
        if p.size != patch_size || p.image.len() != plane * 3 {
            return Err(Error::Shape(format!(
                "patch {} is {}x{}, model expects {patch_size}x{patch_size}",
                p.id, p.size, p.size
            )));
        }
        for ch in 0..3 {
            let dst = &mut t.data[(ch * n + s) * plane..(ch * n + s + 1) * plane];
            for (d, px) in dst.iter_mut().zip(p.image.chunks_exact(3)) {
                *d = px[ch] as f32 / 127.5 - 1.0;
            }
        }
    }
    Ok(t)
}

fn split_probs(probs: &Tensor) -> Vec<ProbMaps> {
    (0..probs.batch)
        .map(|s| {
            let mut data = Vec::with_capacity(probs.channels * probs.plane_len());
            for c in 0..probs.channels {
                data.extend_from_slice(probs.plane(c, s));
            }
            ProbMaps {
                classes: probs.channels,
                height: probs.height,
                width: probs.width,
                data,
            }
        })
        .collect()
}

/// Probability maps for one patch (inference mode).
pub fn predict(model: &mut SegmentationModel, patch: &Patch) -> Result<ProbMaps> {
    let x = images_to_tensor(&[patch], model.patch_size())?;
    Ok(split_probs(&model.infer(&x)?).remove(0))
}

/// Inference over many patches in fixed-size chunks, in input order.
pub fn predict_batch(model: &mut SegmentationModel, patches: &[&Patch]) -> Result<Vec<ProbMaps>> {
    let mut out = Vec::with_capacity(patches.len());
    for chunk in patches.chunks(INFER_BATCH) {
        let x = images_to_tensor(chunk, model.patch_size())?;
        out.extend(split_probs(&model.infer(&x)?));
    }
    Ok(out)
}
