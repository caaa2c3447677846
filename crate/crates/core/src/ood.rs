//! OoD mining: strip the foreground out of ID training patches, then keep
//! only the candidates a trained model still (wrongly) segments something in.

use serde::{Deserialize, Serialize};

use crate::dataset::{ClassList, DatasetManifest, Patch, Role};
use crate::error::{Error, Result};
use crate::metrics::{patch_miou, BinaryMasks};
use crate::segtrain::{predict_batch, threshold, SegmentationModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemovalKind {
    ZeroFill,
    MeanFill,
    NearestInpaint,
}

impl std::str::FromStr for RemovalKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "zero_fill" => Ok(RemovalKind::ZeroFill),
            "mean_fill" => Ok(RemovalKind::MeanFill),
            "nearest_inpaint" => Ok(RemovalKind::NearestInpaint),
            _ => Err(Error::InvalidArgument(format!("unknown removal strategy {s:?}"))),
        }
    }
}

/// How foreground pixels are repainted. `fallback` is the colour used when a
/// patch has no usable background pixel (normally the dataset-wide
/// background mean).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RemovalStrategy {
    pub kind: RemovalKind,
    pub fallback: [u8; 3],
}

impl RemovalStrategy {
    pub fn new(kind: RemovalKind, fallback: [u8; 3]) -> Self {
        Self { kind, fallback }
    }
}

/// Mean colour of non-foreground, non-padding pixels over patches.
pub fn background_mean(patches: &[Patch]) -> [u8; 3] {
    let mut sum = [0u64; 3];
    let mut count = 0u64;
    for p in patches {
        for i in background_sources(p) {
            for (s, v) in sum.iter_mut().zip(&p.image[i * 3..i * 3 + 3]) {
                *s += u64::from(*v);
            }
            count += 1;
        }
    }
    if count == 0 {
        return [0; 3];
    }
    sum.map(|s| (s as f64 / count as f64).round() as u8)
}

/// Pixels a fill may copy from: labelled background and not padding.
fn background_sources(p: &Patch) -> Vec<usize> {
    (0..p.pixel_count())
        .filter(|&i| p.labelmap[i] == 0 && !p.is_padding(i / p.size, i % p.size))
        .collect()
}

/// Repaints every foreground pixel per `strategy`, zeroes the labelmap and
/// tags the result OoD. Background pixels are untouched. An ID patch gets
/// the id suffix `_ood`; an OoD input keeps its id, which makes the
/// operation idempotent.
pub fn remove_foreground(patch: &Patch, strategy: &RemovalStrategy) -> Patch {
    let mut out = patch.clone();
    if patch.role == Role::Id {
        out.id = format!("{}_ood", patch.id);
    }
    out.role = Role::Ood;
    let foreground: Vec<usize> = (0..patch.pixel_count()).filter(|&i| patch.labelmap[i] > 0).collect();
    if foreground.is_empty() {
        return out;
    }
    let sources = background_sources(patch);
    let mean = || {
        if sources.is_empty() {
            return strategy.fallback;
        }
        let mut sum = [0u64; 3];
        for &i in &sources {
            for (s, v) in sum.iter_mut().zip(&patch.image[i * 3..i * 3 + 3]) {
                *s += u64::from(*v);
            }
        }
        sum.map(|s| (s as f64 / sources.len() as f64).round() as u8)
    };
    match strategy.kind {
        RemovalKind::ZeroFill => {
            for &i in &foreground {
                out.image[i * 3..i * 3 + 3].fill(0);
            }
        }
        RemovalKind::MeanFill => {
            let fill = mean();
            for &i in &foreground {
                out.image[i * 3..i * 3 + 3].copy_from_slice(&fill);
            }
        }
        RemovalKind::NearestInpaint => {
            if sources.is_empty() {
                let fill = mean();
                for &i in &foreground {
                    out.image[i * 3..i * 3 + 3].copy_from_slice(&fill);
                }
            } else {
                let is_source: Vec<bool> = {
                    let mut v = vec![false; patch.pixel_count()];
                    for &i in &sources {
                        v[i] = true;
                    }
                    v
                };
                for &i in &foreground {
                    let j = nearest_source(i, patch.size, &is_source);
                    let px = [patch.image[j * 3], patch.image[j * 3 + 1], patch.image[j * 3 + 2]];
                    out.image[i * 3..i * 3 + 3].copy_from_slice(&px);
                }
            }
        }
    }
    out.labelmap.fill(0);
    out
}

/// Closest source pixel by Euclidean distance; ties go to the first in
/// row-major order. Searches square rings of growing radius and stops once
/// the ring cannot beat the best squared distance found.
fn nearest_source(i: usize, size: usize, is_source: &[bool]) -> usize {
    let (r0, c0) = ((i / size) as isize, (i % size) as isize);
    let n = size as isize;
    let mut best: Option<(isize, usize)> = None;
    for radius in 1..n {
        if let Some((d2, _)) = best {
            if radius * radius > d2 {
                break;
            }
        }
        for r in (r0 - radius).max(0)..=(r0 + radius).min(n - 1) {
            for c in (c0 - radius).max(0)..=(c0 + radius).min(n - 1) {
                if (r - r0).abs() != radius && (c - c0).abs() != radius {
                    continue;
                }
                let j = (r * n + c) as usize;
                if !is_source[j] {
                    continue;
                }
                let d2 = (r - r0).pow(2) + (c - c0).pow(2);
                let better = match best {
                    None => true,
                    Some((bd, bj)) => d2 < bd || (d2 == bd && j < bj),
                };
                if better {
                    best = Some((d2, j));
                }
            }
        }
    }
    best.map(|(_, j)| j).expect("caller guarantees at least one source pixel")
}

/// Unfiltered OoD candidates: every ID training patch with its foreground
/// removed, including patches that had none.
pub fn build_unfiltered(id_train: &DatasetManifest, strategy: &RemovalStrategy) -> Result<DatasetManifest> {
    let mut out = DatasetManifest::new(id_train.classes.clone(), id_train.patch_size);
    for p in &id_train.patches {
        let ood = remove_foreground(p, strategy);
        if let Some(f) = id_train.fold_of(&p.id) {
            out.folds.insert(ood.id.clone(), f);
        }
        out.push(ood)?;
    }
    Ok(out)
}

/// Anything that turns patches into per-class binary masks.
pub trait MaskPredictor {
    fn predict_masks(&mut self, patches: &[&Patch]) -> Result<Vec<BinaryMasks>>;
}

/// A trained model followed by a probability threshold.
pub struct ThresholdedModel<'a> {
    pub model: &'a mut SegmentationModel,
    pub tau: f64,
}

impl MaskPredictor for ThresholdedModel<'_> {
    fn predict_masks(&mut self, patches: &[&Patch]) -> Result<Vec<BinaryMasks>> {
        Ok(predict_batch(self.model, patches)?
            .iter()
            .map(|p| threshold(p, self.tau))
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodScore {
    pub patch_id: String,
    /// mIoU of the prediction against the all-zero ground truth.
    pub score: f64,
    /// `score < 1.0`: the model hallucinates foreground, so the patch
    /// carries negative supervision.
    pub kept: bool,
}

fn score_from_masks(patch: &Patch, masks: &BinaryMasks, classes: &ClassList) -> Result<OodScore> {
    let empty = BinaryMasks::empty(classes.len(), patch.size, patch.size);
    let score = patch_miou(masks, &empty, classes)?;
    Ok(OodScore {
        patch_id: patch.id.clone(),
        score,
        kept: score < 1.0,
    })
}

pub fn score_ood<P: MaskPredictor + ?Sized>(predictor: &mut P, patch: &Patch, classes: &ClassList) -> Result<OodScore> {
    let masks = predictor.predict_masks(&[patch])?;
    let m = masks.first().ok_or_else(|| Error::Empty("predictor returned no mask".into()))?;
    score_from_masks(patch, m, classes)
}

/// Keeps exactly the candidates scoring below 1.0, in input order.
pub fn prune_ood<P: MaskPredictor + ?Sized>(
    predictor: &mut P,
    unfiltered: &DatasetManifest,
) -> Result<(DatasetManifest, Vec<OodScore>)> {
    if unfiltered.is_empty() {
        return Err(Error::Empty("no unfiltered OoD candidates to prune".into()));
    }
    let refs: Vec<&Patch> = unfiltered.patches.iter().collect();
    let masks = predictor.predict_masks(&refs)?;
    if masks.len() != refs.len() {
        return Err(Error::Shape(format!("{} masks for {} patches", masks.len(), refs.len())));
    }
    let scores = refs
        .iter()
        .zip(&masks)
        .map(|(p, m)| score_from_masks(p, m, &unfiltered.classes))
        .collect::<Result<Vec<_>>>()?;
    let kept: std::collections::HashSet<&str> =
        scores.iter().filter(|s| s.kept).map(|s| s.patch_id.as_str()).collect();
    let pruned = unfiltered.filter(|p| kept.contains(p.id.as_str()));
    Ok((pruned, scores))
}

pub fn write_scores_csv(path: impl AsRef<std::path::Path>, scores: &[OodScore]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("patch_id,score,kept\n");
    for s in scores {
        out.push_str(&format!("{},{:.6},{}\n", s.patch_id, s.score, s.kept));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn patch(size: usize, labels: Vec<u8>, image: Vec<u8>) -> Patch {
        Patch {
            id: "p".into(),
            region_id: "r".into(),
            offset: (0, 0),
            pad: (0, 0),
            size,
            image,
            labelmap: labels,
            role: Role::Id,
        }
    }

    #[test]
    fn nearest_inpaint_breaks_ties_row_major() {
        // (0,0) foreground; (0,1) and (1,0) are both at distance 1.
        let p = patch(2, vec![1, 0, 0, 0], vec![0, 0, 0, 10, 10, 10, 20, 20, 20, 30, 30, 30]);
        let out = remove_foreground(&p, &RemovalStrategy::new(RemovalKind::NearestInpaint, [1, 1, 1]));
        assert_eq!(&out.image[..3], &[10, 10, 10]);
        assert_eq!(&out.image[3..], &p.image[3..]);
        assert!(out.labelmap.iter().all(|&v| v == 0));
        assert_eq!(out.role, Role::Ood);
    }

    #[test]
    fn foreground_free_patch_is_unchanged() {
        let p = patch(2, vec![0; 4], (0..12).collect());
        let out = remove_foreground(&p, &RemovalStrategy::new(RemovalKind::ZeroFill, [0; 3]));
        assert_eq!(out.image, p.image);
    }

    #[test]
    fn full_foreground_falls_back_to_dataset_mean() {
        let p = patch(2, vec![2; 4], vec![200; 12]);
        for kind in [RemovalKind::MeanFill, RemovalKind::NearestInpaint] {
            let out = remove_foreground(&p, &RemovalStrategy::new(kind, [7, 8, 9]));
            assert_eq!(out.image, [7, 8, 9].repeat(4));
        }
    }

    #[test]
    fn mean_and_zero_fill() {
        let p = patch(2, vec![1, 0, 0, 0], vec![50, 50, 50, 10, 20, 30, 20, 30, 40, 30, 40, 50]);
        let out = remove_foreground(&p, &RemovalStrategy::new(RemovalKind::MeanFill, [0; 3]));
        assert_eq!(&out.image[..3], &[20, 30, 40]);
        let out = remove_foreground(&p, &RemovalStrategy::new(RemovalKind::ZeroFill, [9; 3]));
        assert_eq!(&out.image[..3], &[0, 0, 0]);
    }

    #[test]
    fn padding_is_not_a_fill_source() {
        // 3x3 with the last column padded; (0,1) foreground, (0,2) padding.
        let mut p = patch(3, vec![0, 1, 0, 0, 0, 0, 0, 0, 0], vec![5; 27]);
        p.pad = (0, 1);
        p.image[0..3].copy_from_slice(&[11, 11, 11]);
        for i in [2, 5, 8] {
            p.image[i * 3..i * 3 + 3].fill(0);
        }
        let out = remove_foreground(&p, &RemovalStrategy::new(RemovalKind::NearestInpaint, [0; 3]));
        assert_eq!(&out.image[3..6], &[11, 11, 11]);
    }

    #[test]
    fn removal_is_idempotent() {
        let p = patch(3, vec![0, 1, 2, 0, 1, 0, 0, 0, 0], (0..27).collect());
        let s = RemovalStrategy::new(RemovalKind::NearestInpaint, [0; 3]);
        let once = remove_foreground(&p, &s);
        assert_eq!(remove_foreground(&once, &s), once);
    }
}
