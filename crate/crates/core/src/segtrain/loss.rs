//! Dice loss and the role-weighted segmentation loss.
//!
//! ```text
//! dice(p, g)  = 1 - (2 Σ p·g + s) / (Σ p + Σ g + s)
//! seg_loss    = (1/|C|) Σ_c [ mean_ID dice(F_c, GT_c) + λ · mean_OoD dice(F_c, 0) ]
//! ```
//!
//! Computed in `f64` on probabilities; the trainer converts from and to the
//! network's `f32` buffers.

use crate::error::{Error, Result};

pub const DEFAULT_SMOOTH: f64 = 1.0;

fn check_smooth(smooth: f64) -> Result<()> {
    if !(smooth > 0.0) {
        return Err(Error::InvalidArgument(format!("dice smoothing must be positive, got {smooth}")));
    }
    Ok(())
}

pub fn dice_loss(pred: &[f64], gt: &[f64], smooth: f64) -> Result<f64> {
    check_smooth(smooth)?;
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("dice loss on {} predictions vs {} targets", pred.len(), gt.len())));
    }
    let inter: f64 = pred.iter().zip(gt).map(|(p, g)| p * g).sum();
    let denom = pred.iter().sum::<f64>() + gt.iter().sum::<f64>() + smooth;
    Ok(1.0 - (2.0 * inter + smooth) / denom)
}

/// Dice loss and its gradient with respect to `pred`, written into `grad`.
pub fn dice_loss_grad(pred: &[f64], gt: &[f64], smooth: f64, grad: &mut [f64]) -> Result<f64> {
    check_smooth(smooth)?;
    if pred.len() != gt.len() || grad.len() != pred.len() {
        return Err(Error::Shape(format!(
            "dice gradient on {} predictions, {} targets, {} outputs",
            pred.len(),
            gt.len(),
            grad.len()
        )));
    }
    let inter: f64 = pred.iter().zip(gt).map(|(p, g)| p * g).sum();
    let num = 2.0 * inter + smooth;
    let den = pred.iter().sum::<f64>() + gt.iter().sum::<f64>() + smooth;
    // d/dp_i [1 - num/den] = -(2 g_i den - num) / den^2
    let inv = 1.0 / (den * den);
    for (d, g) in grad.iter_mut().zip(gt) {
        *d = (num - 2.0 * g * den) * inv;
    }
    Ok(1.0 - num / den)
}

/// One batch element: class-major maps of `classes * pixels` values.
#[derive(Debug, Clone, Copy)]
pub struct LossSample<'a> {
    pub pred: &'a [f64],
    /// Ignored for OoD samples, whose target is all zero.
    pub gt: &'a [f64],
    pub ood: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegLossConfig {
    pub classes: usize,
    pub lambda: f64,
    pub smooth: f64,
}

impl SegLossConfig {
    pub fn new(classes: usize, lambda: f64, smooth: f64) -> Result<Self> {
        if classes == 0 {
            return Err(Error::InvalidArgument("class count must be positive".into()));
        }
        if !(lambda >= 0.0) {
            return Err(Error::InvalidArgument(format!("lambda must be non-negative, got {lambda}")));
        }
        check_smooth(smooth)?;
        Ok(Self { classes, lambda, smooth })
    }
}

fn pixels_per_class(samples: &[LossSample<'_>], classes: usize) -> Result<usize> {
    let first = samples.first().ok_or_else(|| Error::Empty("segmentation loss on an empty batch".into()))?;
    if first.pred.len() % classes != 0 {
        return Err(Error::Shape(format!("{} values do not split into {classes} classes", first.pred.len())));
    }
    let len = first.pred.len();
    for s in samples {
        if s.pred.len() != len || (!s.ood && s.gt.len() != len) {
            return Err(Error::Shape(format!(
                "misaligned batch: prediction {} and target {} values, expected {len}",
                s.pred.len(),
                s.gt.len()
            )));
        }
    }
    Ok(len / classes)
}

/// Loss value only. Same contract as [`seg_loss_grad`].
pub fn seg_loss(samples: &[LossSample<'_>], cfg: &SegLossConfig) -> Result<f64> {
    let mut scratch: Vec<Vec<f64>> = samples.iter().map(|s| vec![0.0; s.pred.len()]).collect();
    seg_loss_grad(samples, cfg, &mut scratch)
}

/// Loss and per-sample gradients. A role with no samples in the batch
/// contributes nothing.
pub fn seg_loss_grad(samples: &[LossSample<'_>], cfg: &SegLossConfig, grads: &mut [Vec<f64>]) -> Result<f64> {
    let hw = pixels_per_class(samples, cfg.classes)?;
    if grads.len() != samples.len() {
        return Err(Error::Shape(format!("{} gradient buffers for {} samples", grads.len(), samples.len())));
    }
    let n_ood = samples.iter().filter(|s| s.ood).count();
    let n_id = samples.len() - n_ood;
    let zeros = vec![0.0; hw];
    let mut total = 0.0;
    for (s, g) in samples.iter().zip(grads.iter_mut()) {
        g.resize(s.pred.len(), 0.0);
        let weight = if s.ood {
            cfg.lambda / n_ood as f64
        } else {
            1.0 / n_id as f64
        } / cfg.classes as f64;
        for c in 0..cfg.classes {
            let range = c * hw..(c + 1) * hw;
            let target = if s.ood { &zeros[..] } else { &s.gt[range.clone()] };
            let gslice = &mut g[range.clone()];
            let l = dice_loss_grad(&s.pred[range], target, cfg.smooth, gslice)?;
            for v in gslice.iter_mut() {
                *v *= weight;
            }
            total += weight * l;
        }
    }
    Ok(total)
}

/// Combines already computed per-class Dice losses, `(is_ood, losses)` per
/// sample, with the same role weighting as [`seg_loss`].
pub fn combine_role_losses(per_sample: &[(bool, Vec<f64>)], lambda: f64) -> Result<f64> {
    let classes = per_sample
        .first()
        .map(|(_, l)| l.len())
        .ok_or_else(|| Error::Empty("no samples".into()))?;
    if classes == 0 || per_sample.iter().any(|(_, l)| l.len() != classes) {
        return Err(Error::Shape("per-sample loss vectors differ in class count".into()));
    }
    let role_mean = |ood: bool| {
        let rows: Vec<&Vec<f64>> = per_sample.iter().filter(|(o, _)| *o == ood).map(|(_, l)| l).collect();
        if rows.is_empty() {
            return 0.0;
        }
        rows.iter().map(|l| l.iter().sum::<f64>()).sum::<f64>() / rows.len() as f64
    };
    Ok((role_mean(false) + lambda * role_mean(true)) / classes as f64)
}
