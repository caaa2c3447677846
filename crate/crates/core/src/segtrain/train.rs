use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::loss::{seg_loss_grad, LossSample, SegLossConfig, DEFAULT_SMOOTH};
use super::model::{ModelConfig, SegmentationModel};
use super::nn::{sigmoid, Param, Tensor};
use super::{images_to_tensor, DEFAULT_THRESHOLD};
use crate::dataset::{DatasetManifest, Patch, Role};
use crate::error::{Error, Result};
use crate::seed::stage_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// ID patches only.
    Baseline,
    /// ID patches plus the selected OoD patches, shuffled together.
    MedOod,
    /// OoD patches only; no foreground label is ever seen.
    OodOnly,
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrainMode::Baseline => "baseline",
            TrainMode::MedOod => "med-ood",
            TrainMode::OodOnly => "ood-only",
        })
    }
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(TrainMode::Baseline),
            "med-ood" | "med_ood" => Ok(TrainMode::MedOod),
            "ood-only" | "ood_only" => Ok(TrainMode::OodOnly),
            _ => Err(Error::InvalidArgument(format!("unknown training mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub smooth: f64,
    pub threshold: f64,
    pub batchnorm: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Baseline,
            lambda: 1.0,
            epochs: 20,
            batch_size: 16,
            learning_rate: 1e-3,
            smooth: DEFAULT_SMOOTH,
            threshold: DEFAULT_THRESHOLD,
            batchnorm: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if !(self.smooth > 0.0) {
            return bad(format!("dice smoothing must be positive, got {}", self.smooth));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch size must be positive".into());
        }
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold must lie in (0, 1), got {}", self.threshold));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean batch loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
    pub checkpoint: Option<String>,
}

struct Adam {
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    t: i32,
}

impl Adam {
    fn new(lr: f64) -> Self {
        Self {
            lr: lr as f32,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
        }
    }

    fn step(&mut self, params: Vec<&mut Param>) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for p in params {
            for i in 0..p.value.len() {
                let g = p.grad[i];
                p.m[i] = self.beta1 * p.m[i] + (1.0 - self.beta1) * g;
                p.v[i] = self.beta2 * p.v[i] + (1.0 - self.beta2) * g * g;
                let mhat = p.m[i] / c1;
                let vhat = p.v[i] / c2;
                p.value[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

fn check_mode(dataset: &DatasetManifest, mode: TrainMode) -> Result<()> {
    let wrong = match mode {
        TrainMode::Baseline => dataset.patches.iter().find(|p| p.role != Role::Id),
        TrainMode::OodOnly => dataset.patches.iter().find(|p| p.role != Role::Ood),
        TrainMode::MedOod => None,
    };
    match wrong {
        Some(p) => Err(Error::patch(
            &p.id,
            format!("role {} is not allowed in {mode} training", p.role),
        )),
        None => Ok(()),
    }
}

/// Trains a freshly initialized model on `dataset`.
pub fn train(dataset: &DatasetManifest, config: &TrainConfig) -> Result<(SegmentationModel, TrainHistory)> {
    let model_cfg = ModelConfig::new(dataset.classes.len(), dataset.patch_size, config.batchnorm);
    let mut model = SegmentationModel::new(model_cfg, config.seed)?;
    let history = train_model(&mut model, dataset, config)?;
    Ok((model, history))
}

/// Minimizes the segmentation loss over `config.epochs` passes with a
/// seeded batch order.
pub fn train_model(model: &mut SegmentationModel, dataset: &DatasetManifest, config: &TrainConfig) -> Result<TrainHistory> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Empty("training dataset has no patches".into()));
    }
    if dataset.patch_size != model.patch_size() || dataset.classes.len() != model.classes() {
        return Err(Error::Shape(format!(
            "dataset has {} classes at {}px, model {} classes at {}px",
            dataset.classes.len(),
            dataset.patch_size,
            model.classes(),
            model.patch_size()
        )));
    }
    check_mode(dataset, config.mode)?;
    let loss_cfg = SegLossConfig::new(model.classes(), config.lambda, config.smooth)?;
    let mut opt = Adam::new(config.learning_rate);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = TrainHistory {
        epoch_losses: Vec::with_capacity(config.epochs),
        steps: 0,
        checkpoint: None,
    };
    for epoch in 0..config.epochs {
        order.shuffle(&mut stage_rng(config.seed, &format!("train/epoch-{epoch}")));
        let mut sum = 0.0;
        let mut batches = 0;
        for idx in order.chunks(config.batch_size) {
            let batch: Vec<&Patch> = idx.iter().map(|&i| &dataset.patches[i]).collect();
            let loss = train_step(model, &batch, &loss_cfg, &mut opt)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step: history.steps,
                    loss,
                });
            }
            history.steps += 1;
            sum += loss;
            batches += 1;
        }
        history.epoch_losses.push(sum / batches as f64);
    }
    Ok(history)
}

fn train_step(model: &mut SegmentationModel, batch: &[&Patch], loss_cfg: &SegLossConfig, opt: &mut Adam) -> Result<f64> {
    let p = model.patch_size();
    let plane = p * p;
    let classes = model.classes();
    let n = batch.len();
    let x = images_to_tensor(batch, p)?;
    model.zero_grad();
    let (logits, cache) = model.forward(&x, true)?;

    let mut preds = vec![vec![0.0f64; classes * plane]; n];
    let mut gts = vec![vec![0.0f64; classes * plane]; n];
    for (s, patch) in batch.iter().enumerate() {
        for c in 0..classes {
            for (d, &v) in preds[s][c * plane..(c + 1) * plane].iter_mut().zip(logits.plane(c, s)) {
                *d = sigmoid(v) as f64;
            }
        }
        if patch.role == Role::Id {
            for (i, &label) in patch.labelmap.iter().enumerate() {
                if label > 0 {
                    gts[s][(label as usize - 1) * plane + i] = 1.0;
                }
            }
        }
    }
    let samples: Vec<LossSample<'_>> = batch
        .iter()
        .enumerate()
        .map(|(s, patch)| LossSample {
            pred: &preds[s],
            gt: &gts[s],
            ood: patch.role == Role::Ood,
        })
        .collect();
    let mut grads = vec![Vec::new(); n];
    let loss = seg_loss_grad(&samples, loss_cfg, &mut grads)?;
    if !loss.is_finite() {
        return Ok(loss);
    }

    let mut dlogits = Tensor::zeros(classes, n, p, p);
    for s in 0..n {
        for c in 0..classes {
            let start = (c * n + s) * plane;
            for (i, d) in dlogits.data[start..start + plane].iter_mut().enumerate() {
                let prob = preds[s][c * plane + i];
                *d = (grads[s][c * plane + i] * prob * (1.0 - prob)) as f32;
            }
        }
    }
    model.backward(&dlogits, cache);
    opt.step(model.params_mut());
    Ok(loss)
}
