//! Per-class IoU and Dice with the empty-empty convention, and their
//! macro aggregation (mean over classes per patch, then mean over patches).
//!
//! A class that is absent from both prediction and ground truth scores 1.0.
//! This is what makes "the model predicts nothing on a foreground-free patch"
//! a perfect score, which the OoD pruning rule relies on.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::ClassList;
use crate::error::{Error, Result};

/// One boolean plane per foreground class, class-major (`c * h * w + i`).
/// Plane `c` describes labelmap value `c + 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMasks {
    classes: usize,
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMasks {
    pub fn new(classes: usize, height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != classes * height * width {
            return Err(Error::Shape(format!(
                "{} mask values for {classes} classes of {height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            classes,
            height,
            width,
            data,
        })
    }

    pub fn empty(classes: usize, height: usize, width: usize) -> Self {
        Self {
            classes,
            height,
            width,
            data: vec![false; classes * height * width],
        }
    }

    /// Splits a class-index labelmap into per-class planes.
    pub fn from_labelmap(labelmap: &[u8], height: usize, width: usize, classes: usize) -> Result<Self> {
        let n = height * width;
        if labelmap.len() != n {
            return Err(Error::Shape(format!("labelmap has {} values for {height}x{width}", labelmap.len())));
        }
        let mut data = vec![false; classes * n];
        for (i, &v) in labelmap.iter().enumerate() {
            if v as usize > classes {
                return Err(Error::Shape(format!("label {v} exceeds class count {classes}")));
            }
            if v > 0 {
                data[(v as usize - 1) * n + i] = true;
            }
        }
        Ok(Self {
            classes,
            height,
            width,
            data,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Plane for 0-based class index `c`.
    pub fn channel(&self, c: usize) -> &[bool] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [bool] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    /// True at pixels where any class is set.
    pub fn any_foreground(&self) -> Vec<bool> {
        let n = self.height * self.width;
        (0..n).map(|i| (0..self.classes).any(|c| self.data[c * n + i])).collect()
    }

    fn check_same_shape(&self, other: &Self) -> Result<()> {
        if (self.classes, self.height, self.width) != (other.classes, other.height, other.width) {
            return Err(Error::Shape(format!(
                "masks {}x{}x{} vs {}x{}x{}",
                self.classes, self.height, self.width, other.classes, other.height, other.width
            )));
        }
        Ok(())
    }
}

fn overlap_counts(pred: &[bool], gt: &[bool]) -> Result<(usize, usize, usize)> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("prediction has {} pixels, ground truth {}", pred.len(), gt.len())));
    }
    let mut inter = 0;
    let mut p = 0;
    let mut g = 0;
    for (&a, &b) in pred.iter().zip(gt) {
        p += a as usize;
        g += b as usize;
        inter += (a && b) as usize;
    }
    Ok((inter, p, g))
}

/// `|pred ∩ gt| / |pred ∪ gt|`, 1.0 when both are empty.
pub fn class_iou(pred: &[bool], gt: &[bool]) -> Result<f64> {
    let (inter, p, g) = overlap_counts(pred, gt)?;
    let union = p + g - inter;
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// `2 |pred ∩ gt| / (|pred| + |gt|)`, 1.0 when both are empty.
pub fn class_dice(pred: &[bool], gt: &[bool]) -> Result<f64> {
    let (inter, p, g) = overlap_counts(pred, gt)?;
    Ok(if p + g == 0 { 1.0 } else { 2.0 * inter as f64 / (p + g) as f64 })
}

fn check_classes(pred: &BinaryMasks, gt: &BinaryMasks, classes: &ClassList) -> Result<()> {
    pred.check_same_shape(gt)?;
    if pred.classes != classes.len() {
        return Err(Error::Shape(format!(
            "{} mask planes for {} classes",
            pred.classes,
            classes.len()
        )));
    }
    Ok(())
}

pub fn per_class_iou(pred: &BinaryMasks, gt: &BinaryMasks, classes: &ClassList) -> Result<Vec<f64>> {
    check_classes(pred, gt, classes)?;
    (0..classes.len()).map(|c| class_iou(pred.channel(c), gt.channel(c))).collect()
}

pub fn per_class_dice(pred: &BinaryMasks, gt: &BinaryMasks, classes: &ClassList) -> Result<Vec<f64>> {
    check_classes(pred, gt, classes)?;
    (0..classes.len()).map(|c| class_dice(pred.channel(c), gt.channel(c))).collect()
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Mean class IoU over all foreground classes of one patch.
pub fn patch_miou(pred: &BinaryMasks, gt: &BinaryMasks, classes: &ClassList) -> Result<f64> {
    Ok(mean(&per_class_iou(pred, gt, classes)?))
}

pub fn patch_dsc(pred: &BinaryMasks, gt: &BinaryMasks, classes: &ClassList) -> Result<f64> {
    Ok(mean(&per_class_dice(pred, gt, classes)?))
}

/// Scores of a single patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchMetrics {
    pub patch_id: String,
    pub class_iou: Vec<f64>,
    pub class_dsc: Vec<f64>,
    pub miou: f64,
    pub dsc: f64,
    /// Ground-truth background pixels predicted as any foreground class.
    pub false_positive_pixels: usize,
    pub background_pixels: usize,
}

pub fn evaluate_patch(
    patch_id: impl Into<String>,
    pred: &BinaryMasks,
    gt: &BinaryMasks,
    classes: &ClassList,
) -> Result<PatchMetrics> {
    let class_iou = per_class_iou(pred, gt, classes)?;
    let class_dsc = per_class_dice(pred, gt, classes)?;
    let pred_fg = pred.any_foreground();
    let gt_fg = gt.any_foreground();
    let background_pixels = gt_fg.iter().filter(|&&g| !g).count();
    let false_positive_pixels = pred_fg.iter().zip(&gt_fg).filter(|&(&p, &g)| p && !g).count();
    Ok(PatchMetrics {
        patch_id: patch_id.into(),
        miou: mean(&class_iou),
        dsc: mean(&class_dsc),
        class_iou,
        class_dsc,
        false_positive_pixels,
        background_pixels,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub miou: f64,
    pub dsc: f64,
    /// Class name and mean IoU of that class over patches, in class order.
    pub per_class_iou: Vec<(String, f64)>,
    pub patch_count: usize,
    /// Fraction of ground-truth background pixels predicted as foreground.
    pub false_positive_rate: f64,
}

/// Unweighted mean over patches.
pub fn aggregate(patches: &[PatchMetrics], classes: &ClassList) -> Result<MetricsReport> {
    if patches.is_empty() {
        return Err(Error::Empty("no patch metrics to aggregate".into()));
    }
    if let Some(p) = patches.iter().find(|p| p.class_iou.len() != classes.len()) {
        return Err(Error::Shape(format!(
            "patch {} has {} class scores for {} classes",
            p.patch_id,
            p.class_iou.len(),
            classes.len()
        )));
    }
    let n = patches.len() as f64;
    let per_class_iou = classes
        .names()
        .iter()
        .enumerate()
        .map(|(c, name)| (name.clone(), patches.iter().map(|p| p.class_iou[c]).sum::<f64>() / n))
        .collect();
    let fp: usize = patches.iter().map(|p| p.false_positive_pixels).sum();
    let bg: usize = patches.iter().map(|p| p.background_pixels).sum();
    Ok(MetricsReport {
        miou: patches.iter().map(|p| p.miou).sum::<f64>() / n,
        dsc: patches.iter().map(|p| p.dsc).sum::<f64>() / n,
        per_class_iou,
        patch_count: patches.len(),
        false_positive_rate: if bg == 0 { 0.0 } else { fp as f64 / bg as f64 },
    })
}

/// mIoU an all-empty predictor would score: per patch, the fraction of
/// classes absent from its ground truth.
pub fn empty_predictor_miou(gts: &[BinaryMasks]) -> Result<f64> {
    if gts.is_empty() {
        return Err(Error::Empty("no ground-truth patches".into()));
    }
    let total: f64 = gts
        .iter()
        .map(|g| {
            let absent = (0..g.classes()).filter(|&c| !g.channel(c).iter().any(|&v| v)).count();
            absent as f64 / g.classes() as f64
        })
        .sum();
    Ok(total / gts.len() as f64)
}

/// CSV with one row per patch (`patch_id`, one IoU column per class,
/// `miou`, `dsc`) followed by a `mean` summary row.
pub fn write_metrics_csv(
    path: impl AsRef<Path>,
    patches: &[PatchMetrics],
    report: &MetricsReport,
    classes: &ClassList,
) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    out.push_str("patch_id");
    for name in classes.names() {
        out.push_str(&format!(",iou_{}", name.replace([',', ' '], "_")));
    }
    out.push_str(",miou,dsc\n");
    for p in patches {
        out.push_str(&p.patch_id);
        for v in &p.class_iou {
            out.push_str(&format!(",{v:.6}"));
        }
        out.push_str(&format!(",{:.6},{:.6}\n", p.miou, p.dsc));
    }
    out.push_str("mean");
    for (_, v) in &report.per_class_iou {
        out.push_str(&format!(",{v:.6}"));
    }
    out.push_str(&format!(",{:.6},{:.6}\n", report.miou, report.dsc));
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
