//! Data model: class lists, labeled regions, fixed-size patches and the
//! manifest that carries patches between pipeline stages.
//!
//! Labelmaps are a single `u8` channel holding the class index; `0` is
//! non-foreground and `1..=|C|` are the foreground classes. Images are
//! interleaved 8-bit RGB in row-major order.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::stage_rng;

/// Foreground class names of the Lizard colon nuclei dataset.
pub const LIZARD_CLASSES: [&str; 6] = [
    "Eosinophil",
    "Epithelial",
    "Lymphocyte",
    "Plasma",
    "Neutrophil",
    "Connective tissue",
];

pub const DEFAULT_PATCH_SIZE: usize = 128;

/// Ordered foreground classes. Index 0 (non-foreground) is implicit and never
/// listed, so `names()[i]` is class `i + 1` in a labelmap.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct ClassList {
    names: Vec<String>,
}

impl ClassList {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(Error::ClassList("at least one foreground class is required".into()));
        }
        if names.len() > u8::MAX as usize {
            return Err(Error::ClassList(format!(
                "{} classes do not fit an 8-bit labelmap",
                names.len()
            )));
        }
        let mut seen = HashSet::new();
        for name in &names {
            if name.trim().is_empty() {
                return Err(Error::ClassList("class names must be non-empty".into()));
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::ClassList(format!("duplicate class name {name:?}")));
            }
        }
        Ok(Self { names })
    }

    pub fn lizard() -> Self {
        Self::new(LIZARD_CLASSES).expect("static class list is valid")
    }

    /// Generic names `class1..classN`.
    pub fn numbered(count: usize) -> Result<Self> {
        Self::new((1..=count).map(|i| format!("class{i}")))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Name of labelmap value `label` (1-based). `None` for 0 or out of range.
    pub fn name(&self, label: u8) -> Option<&str> {
        (label as usize)
            .checked_sub(1)
            .and_then(|i| self.names.get(i))
            .map(String::as_str)
    }
}

impl TryFrom<Vec<String>> for ClassList {
    type Error = Error;

    fn try_from(names: Vec<String>) -> Result<Self> {
        Self::new(names)
    }
}

impl From<ClassList> for Vec<String> {
    fn from(c: ClassList) -> Self {
        c.names
    }
}

/// A full-size image region with its class labelmap.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledRegion {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub image: Vec<u8>,
    pub labelmap: Vec<u8>,
}

impl LabeledRegion {
    pub fn new(
        id: impl Into<String>,
        height: usize,
        width: usize,
        image: Vec<u8>,
        labelmap: Vec<u8>,
        classes: &ClassList,
    ) -> Result<Self> {
        let region = Self {
            id: id.into(),
            height,
            width,
            image,
            labelmap,
        };
        region.validate(classes)?;
        Ok(region)
    }

    pub fn validate(&self, classes: &ClassList) -> Result<()> {
        let fail = |reason: String| Error::InvalidRegion {
            region_id: self.id.clone(),
            reason,
        };
        if self.height == 0 || self.width == 0 {
            return Err(fail("region is empty".into()));
        }
        let n = self.height * self.width;
        if self.image.len() != n * 3 || self.labelmap.len() != n {
            return Err(fail(format!(
                "image has {} bytes and labelmap {} values, expected {} and {} for {}x{}",
                self.image.len(),
                self.labelmap.len(),
                n * 3,
                n,
                self.height,
                self.width
            )));
        }
        if let Some(&bad) = self.labelmap.iter().find(|&&v| v as usize > classes.len()) {
            return Err(fail(format!(
                "labelmap value {bad} exceeds class count {}",
                classes.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    /// In-distribution: carries the pixel-level class labels.
    Id,
    /// Out-of-distribution: foreground-free, ground truth is all zero.
    Ood,
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Role::Id => "id",
            Role::Ood => "ood",
        })
    }
}

/// A square crop of a region. Pixels beyond the region border are padding:
/// intensity 0 and label 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Patch {
    pub id: String,
    pub region_id: String,
    /// Top-left corner in region pixels, `(row, col)`.
    pub offset: (usize, usize),
    /// Padded extent, `(rows, cols)`, at the bottom and right edges.
    pub pad: (usize, usize),
    pub size: usize,
    pub image: Vec<u8>,
    pub labelmap: Vec<u8>,
    pub role: Role,
}

impl Patch {
    pub fn pixel_count(&self) -> usize {
        self.size * self.size
    }

    /// True when `(row, col)` lies in the padded margin.
    pub fn is_padding(&self, row: usize, col: usize) -> bool {
        row >= self.size - self.pad.0 || col >= self.size - self.pad.1
    }

    pub fn has_foreground(&self) -> bool {
        self.labelmap.iter().any(|&v| v > 0)
    }

    pub fn validate(&self, classes: &ClassList, patch_size: usize) -> Result<()> {
        if self.size != patch_size {
            return Err(Error::patch(
                &self.id,
                format!("patch size {} differs from manifest size {patch_size}", self.size),
            ));
        }
        let n = self.pixel_count();
        if self.image.len() != n * 3 || self.labelmap.len() != n {
            return Err(Error::patch(
                &self.id,
                format!(
                    "image/labelmap shape mismatch: {} image bytes, {} labels, expected {} and {}",
                    self.image.len(),
                    self.labelmap.len(),
                    n * 3,
                    n
                ),
            ));
        }
        if self.pad.0 >= self.size.max(1) || self.pad.1 >= self.size.max(1) {
            return Err(Error::patch(&self.id, format!("padding {:?} covers the whole patch", self.pad)));
        }
        if let Some(&bad) = self.labelmap.iter().find(|&&v| v as usize > classes.len()) {
            return Err(Error::patch(
                &self.id,
                format!("labelmap value {bad} exceeds class count {}", classes.len()),
            ));
        }
        if self.role == Role::Ood && self.has_foreground() {
            return Err(Error::patch(&self.id, "OoD patch has foreground labels"));
        }
        Ok(())
    }
}

/// Tiles `region` into `patch_size` squares anchored at (0, 0), row-major.
/// Tiles crossing the bottom or right border are zero padded.
pub fn patchify(region: &LabeledRegion, patch_size: usize) -> Result<Vec<Patch>> {
    if patch_size == 0 {
        return Err(Error::InvalidArgument("patch size must be at least 1".into()));
    }
    if region.height == 0 || region.width == 0 {
        return Err(Error::InvalidRegion {
            region_id: region.id.clone(),
            reason: "region is empty".into(),
        });
    }
    let rows = region.height.div_ceil(patch_size);
    let cols = region.width.div_ceil(patch_size);
    let mut out = Vec::with_capacity(rows * cols);
    for gr in 0..rows {
        for gc in 0..cols {
            let (r0, c0) = (gr * patch_size, gc * patch_size);
            let valid_rows = patch_size.min(region.height - r0);
            let valid_cols = patch_size.min(region.width - c0);
            let mut image = vec![0u8; patch_size * patch_size * 3];
            let mut labelmap = vec![0u8; patch_size * patch_size];
            for r in 0..valid_rows {
                let src = (r0 + r) * region.width + c0;
                let dst = r * patch_size;
                labelmap[dst..dst + valid_cols].copy_from_slice(&region.labelmap[src..src + valid_cols]);
                image[dst * 3..(dst + valid_cols) * 3]
                    .copy_from_slice(&region.image[src * 3..(src + valid_cols) * 3]);
            }
            out.push(Patch {
                id: format!("{}_r{gr:03}_c{gc:03}", region.id),
                region_id: region.id.clone(),
                offset: (r0, c0),
                pad: (patch_size - valid_rows, patch_size - valid_cols),
                size: patch_size,
                image,
                labelmap,
                role: Role::Id,
            });
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`]: rebuilds the region rasters from its patches,
/// dropping padding. Returns `(image, labelmap)`.
pub fn reassemble(patches: &[Patch], height: usize, width: usize) -> (Vec<u8>, Vec<u8>) {
    let mut image = vec![0u8; height * width * 3];
    let mut labelmap = vec![0u8; height * width];
    for p in patches {
        let valid_rows = p.size - p.pad.0;
        let valid_cols = p.size - p.pad.1;
        for r in 0..valid_rows {
            let dst = (p.offset.0 + r) * width + p.offset.1;
            let src = r * p.size;
            labelmap[dst..dst + valid_cols].copy_from_slice(&p.labelmap[src..src + valid_cols]);
            image[dst * 3..(dst + valid_cols) * 3].copy_from_slice(&p.image[src * 3..(src + valid_cols) * 3]);
        }
    }
    (image, labelmap)
}

/// Region-level fold assignment: ids are sorted, shuffled with the seeded
/// generator, then dealt round-robin into `k` folds.
pub fn split_region_ids<S: AsRef<str>>(region_ids: &[S], k: usize, seed: u64) -> Result<BTreeMap<String, usize>> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 folds, got {k}")));
    }
    let unique: BTreeSet<&str> = region_ids.iter().map(AsRef::as_ref).collect();
    if unique.len() < k {
        return Err(Error::TooFewRegions {
            regions: unique.len(),
            folds: k,
        });
    }
    let mut ids: Vec<&str> = unique.into_iter().collect();
    ids.shuffle(&mut stage_rng(seed, "split-folds"));
    Ok(ids
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id.to_string(), i % k))
        .collect())
}

pub fn split_folds(regions: &[LabeledRegion], k: usize, seed: u64) -> Result<BTreeMap<String, usize>> {
    let ids: Vec<&str> = regions.iter().map(|r| r.id.as_str()).collect();
    split_region_ids(&ids, k, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Polarity {
    pub positive: bool,
    pub negative: bool,
}

/// A patch is positive if it holds any foreground pixel and negative if it
/// holds any non-foreground pixel (padding included). Mixed patches are both.
pub fn sample_polarity(patch: &Patch) -> Polarity {
    Polarity {
        positive: patch.labelmap.iter().any(|&v| v > 0),
        negative: patch.labelmap.contains(&0),
    }
}

/// Ordered patch collection passed between stages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub classes: ClassList,
    pub patch_size: usize,
    pub patches: Vec<Patch>,
    /// Patch id to fold index. Empty when the dataset has not been split.
    pub folds: BTreeMap<String, usize>,
}

impl DatasetManifest {
    pub fn new(classes: ClassList, patch_size: usize) -> Self {
        Self {
            classes,
            patch_size,
            patches: Vec::new(),
            folds: BTreeMap::new(),
        }
    }

    pub fn from_patches(classes: ClassList, patch_size: usize, patches: Vec<Patch>) -> Result<Self> {
        let mut m = Self::new(classes, patch_size);
        m.patches = patches;
        m.validate()?;
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn push(&mut self, patch: Patch) -> Result<()> {
        patch.validate(&self.classes, self.patch_size)?;
        if self.patches.iter().any(|p| p.id == patch.id) {
            return Err(Error::DuplicateId(patch.id));
        }
        self.patches.push(patch);
        Ok(())
    }

    pub fn fold_of(&self, patch_id: &str) -> Option<usize> {
        self.folds.get(patch_id).copied()
    }

    pub fn fold_count(&self) -> usize {
        self.folds.values().max().map_or(0, |m| m + 1)
    }

    /// Gives every patch the fold of its region.
    pub fn assign_region_folds(&mut self, region_folds: &BTreeMap<String, usize>) -> Result<()> {
        let mut folds = BTreeMap::new();
        for p in &self.patches {
            let fold = region_folds.get(&p.region_id).ok_or_else(|| {
                Error::patch(&p.id, format!("region {} has no fold assignment", p.region_id))
            })?;
            folds.insert(p.id.clone(), *fold);
        }
        self.folds = folds;
        Ok(())
    }

    /// Checks every patch plus the manifest-level invariants: unique ids,
    /// folds (if present) covering every patch, and no region straddling two
    /// folds.
    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for p in &self.patches {
            p.validate(&self.classes, self.patch_size)?;
            if !ids.insert(p.id.as_str()) {
                return Err(Error::DuplicateId(p.id.clone()));
            }
        }
        if self.folds.is_empty() {
            return Ok(());
        }
        let mut region_fold: BTreeMap<&str, usize> = BTreeMap::new();
        for p in &self.patches {
            let fold = self
                .fold_of(&p.id)
                .ok_or_else(|| Error::patch(&p.id, "missing fold assignment"))?;
            if let Some(prev) = region_fold.insert(p.region_id.as_str(), fold) {
                if prev != fold {
                    return Err(Error::patch(
                        &p.id,
                        format!("region {} spans folds {prev} and {fold}", p.region_id),
                    ));
                }
            }
        }
        for id in self.folds.keys() {
            if !ids.contains(id.as_str()) {
                return Err(Error::patch(id, "fold assigned to unknown patch"));
            }
        }
        Ok(())
    }

    /// True when the fold indices in use are exactly `0..k`. Train/test
    /// views of a split manifest legitimately use only a subset.
    pub fn folds_cover(&self, k: usize) -> bool {
        let used: BTreeSet<usize> = self.folds.values().copied().collect();
        used.len() == k && used.iter().all(|&f| f < k)
    }

    /// Subset with the same classes, keeping order and fold entries.
    pub fn filter(&self, mut keep: impl FnMut(&Patch) -> bool) -> Self {
        let patches: Vec<Patch> = self.patches.iter().filter(|p| keep(p)).cloned().collect();
        let folds = patches
            .iter()
            .filter_map(|p| self.folds.get(&p.id).map(|f| (p.id.clone(), *f)))
            .collect();
        Self {
            classes: self.classes.clone(),
            patch_size: self.patch_size,
            patches,
            folds,
        }
    }

    /// Training view for cross validation: every patch outside `fold`.
    pub fn train_split(&self, fold: usize) -> Self {
        self.filter(|p| self.fold_of(&p.id) != Some(fold))
    }

    pub fn test_split(&self, fold: usize) -> Self {
        self.filter(|p| self.fold_of(&p.id) == Some(fold))
    }

    pub fn count_role(&self, role: Role) -> usize {
        self.patches.iter().filter(|p| p.role == role).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn region(id: &str, h: usize, w: usize) -> LabeledRegion {
        let image = (0..h * w * 3).map(|i| (i % 251) as u8 + 1).collect();
        let labelmap = (0..h * w).map(|i| (i % 3) as u8).collect();
        LabeledRegion::new(id, h, w, image, labelmap, &ClassList::numbered(2).unwrap()).unwrap()
    }

    #[test]
    fn class_list_rejects_duplicates_and_empty() {
        assert!(ClassList::new(Vec::<String>::new()).is_err());
        assert!(ClassList::new(["a", "a"]).is_err());
        assert!(ClassList::new(["a", " "]).is_err());
        let c = ClassList::lizard();
        assert_eq!(c.len(), 6);
        assert_eq!(c.name(0), None);
        assert_eq!(c.name(6), Some("Connective tissue"));
    }

    #[test]
    fn exact_fit_gives_one_unpadded_patch() {
        let p = patchify(&region("a", 128, 128), 128).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].pad, (0, 0));
    }

    #[test]
    fn ragged_region_pads_last_row_and_column() {
        // 300 rows x 200 cols → ceil(300/128)=3 rows, ceil(200/128)=2 cols.
        let r = region("a", 300, 200);
        let p = patchify(&r, 128).unwrap();
        assert_eq!(p.len(), 6);
        assert_eq!(p[5].offset, (256, 128));
        assert_eq!(p[5].pad, (3 * 128 - 300, 2 * 128 - 200));
        assert_eq!(p[1].pad, (0, 56));
        assert_eq!(p[4].pad, (84, 0));
        let last = &p[5];
        for row in 0..128 {
            for col in 0..128 {
                if last.is_padding(row, col) {
                    assert_eq!(last.labelmap[row * 128 + col], 0);
                    assert_eq!(&last.image[(row * 128 + col) * 3..][..3], &[0, 0, 0]);
                }
            }
        }
    }

    #[test]
    fn lizard_average_region_gives_64_patches() {
        assert_eq!(patchify(&region("a", 1016, 917), 128).unwrap().len(), 64);
    }

    #[test]
    fn zero_patch_size_is_rejected() {
        assert!(patchify(&region("a", 4, 4), 0).is_err());
    }

    #[test]
    fn reassembly_is_lossless() {
        let r = region("a", 37, 53);
        let (image, labelmap) = reassemble(&patchify(&r, 16).unwrap(), 37, 53);
        assert_eq!(image, r.image);
        assert_eq!(labelmap, r.labelmap);
    }

    #[test]
    fn folds_round_robin() {
        let ids: Vec<String> = (0..9).map(|i| format!("r{i}")).collect();
        let folds = split_region_ids(&ids, 3, 7).unwrap();
        let mut sizes = [0; 3];
        for f in folds.values() {
            sizes[*f] += 1;
        }
        assert_eq!(sizes, [3, 3, 3]);
        assert_eq!(folds, split_region_ids(&ids, 3, 7).unwrap());

        let ids: Vec<String> = (0..10).map(|i| format!("r{i}")).collect();
        let folds = split_region_ids(&ids, 3, 7).unwrap();
        let mut sizes = [0; 3];
        for f in folds.values() {
            sizes[*f] += 1;
        }
        sizes.sort_unstable();
        assert_eq!(sizes, [3, 3, 4]);
    }

    #[test]
    fn folds_need_enough_regions() {
        assert!(matches!(
            split_region_ids(&["a", "b"], 3, 0),
            Err(Error::TooFewRegions { regions: 2, folds: 3 })
        ));
        assert!(split_region_ids(&["a", "b"], 1, 0).is_err());
    }

    #[test]
    fn polarity_cases() {
        let mut p = patchify(&region("a", 2, 2), 2).unwrap().remove(0);
        p.labelmap = vec![0; 4];
        assert_eq!(sample_polarity(&p), Polarity { positive: false, negative: true });
        p.labelmap = vec![1; 4];
        assert_eq!(sample_polarity(&p), Polarity { positive: true, negative: false });
        p.labelmap = vec![0, 1, 2, 0];
        assert_eq!(sample_polarity(&p), Polarity { positive: true, negative: true });
    }

    #[test]
    fn manifest_fold_validation_catches_straddling_regions() {
        let r = region("a", 8, 8);
        let mut m = DatasetManifest::from_patches(ClassList::numbered(2).unwrap(), 4, patchify(&r, 4).unwrap()).unwrap();
        m.assign_region_folds(&BTreeMap::from([("a".to_string(), 0)])).unwrap();
        m.validate().unwrap();
        let first = m.patches[0].id.clone();
        m.folds.insert(first, 1);
        assert!(m.validate().is_err());
    }
}
