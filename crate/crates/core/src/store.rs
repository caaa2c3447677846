//! On-disk layout.
//!
//! A patch dataset directory holds
//!
//! ```text
//! dataset.json     {"classes": [...], "patch_size": 128}
//! manifest.jsonl   one PatchRecord per line
//! images/<id>.png  8-bit RGB
//! labels/<id>.png  8-bit single channel class indices
//! ```
//!
//! A region directory (the input of `patchify`) has the same shape with
//! `regions.jsonl` in place of `manifest.jsonl` and no patch size.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::dataset::{ClassList, DatasetManifest, LabeledRegion, Patch, Role};
use crate::error::{Error, Result};
use crate::metrics::BinaryMasks;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const REGIONS_FILE: &str = "regions.jsonl";
pub const DATASET_META_FILE: &str = "dataset.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub id: String,
    pub region_id: String,
    pub offset: [usize; 2],
    pub pad: [usize; 2],
    pub role: Role,
    pub fold: Option<usize>,
    pub image_path: String,
    pub label_path: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionRecord {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub image_path: String,
    pub label_path: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetMeta {
    classes: ClassList,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    patch_size: Option<usize>,
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_meta(dir: &Path) -> Result<DatasetMeta> {
    let path = dir.join(DATASET_META_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&path, e))
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::format(path, e))?;
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

fn save_rgb(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<()> {
    let img = RgbImage::from_raw(width as u32, height as u32, data.to_vec())
        .ok_or_else(|| Error::format(path, "image buffer does not match its dimensions"))?;
    img.save(path).map_err(|e| Error::format(path, e))
}

fn save_gray(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<()> {
    let img = GrayImage::from_raw(width as u32, height as u32, data.to_vec())
        .ok_or_else(|| Error::format(path, "label buffer does not match its dimensions"))?;
    img.save(path).map_err(|e| Error::format(path, e))
}

/// Reads a PNG as `(width, height, rgb bytes)`.
fn load_rgb(path: &Path) -> std::result::Result<(usize, usize, Vec<u8>), String> {
    let img = image::open(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let rgb = img.to_rgb8();
    Ok((rgb.width() as usize, rgb.height() as usize, rgb.into_raw()))
}

fn load_gray(path: &Path) -> std::result::Result<(usize, usize, Vec<u8>), String> {
    let img = image::open(path).map_err(|e| format!("{}: {e}", path.display()))?;
    if img.color() != image::ColorType::L8 {
        return Err(format!("{}: expected 8-bit single channel, got {:?}", path.display(), img.color()));
    }
    let g = img.to_luma8();
    Ok((g.width() as usize, g.height() as usize, g.into_raw()))
}

pub fn save_manifest(manifest: &DatasetManifest, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    create_dir(&dir.join("images"))?;
    create_dir(&dir.join("labels"))?;
    write_json(
        &dir.join(DATASET_META_FILE),
        &DatasetMeta {
            classes: manifest.classes.clone(),
            patch_size: Some(manifest.patch_size),
        },
    )?;
    let mut records = Vec::with_capacity(manifest.len());
    for p in &manifest.patches {
        let image_path = format!("images/{}.png", p.id);
        let label_path = format!("labels/{}.png", p.id);
        save_rgb(&dir.join(&image_path), p.size, p.size, &p.image)?;
        save_gray(&dir.join(&label_path), p.size, p.size, &p.labelmap)?;
        records.push(PatchRecord {
            id: p.id.clone(),
            region_id: p.region_id.clone(),
            offset: [p.offset.0, p.offset.1],
            pad: [p.pad.0, p.pad.1],
            role: p.role,
            fold: manifest.fold_of(&p.id),
            image_path,
            label_path,
        });
    }
    write_jsonl(&dir.join(MANIFEST_FILE), &records)
}

pub fn load_manifest(dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    let meta = read_meta(dir)?;
    let patch_size = meta
        .patch_size
        .ok_or_else(|| Error::format(dir.join(DATASET_META_FILE), "missing patch_size"))?;
    let records: Vec<PatchRecord> = read_jsonl(&dir.join(MANIFEST_FILE))?;
    let mut patches = Vec::with_capacity(records.len());
    let mut folds = BTreeMap::new();
    for rec in records {
        let (iw, ih, image) = load_rgb(&dir.join(&rec.image_path)).map_err(|m| Error::patch(&rec.id, m))?;
        let (lw, lh, labelmap) = load_gray(&dir.join(&rec.label_path)).map_err(|m| Error::patch(&rec.id, m))?;
        if (iw, ih) != (lw, lh) {
            return Err(Error::patch(
                &rec.id,
                format!("image is {iw}x{ih} but labelmap is {lw}x{lh}"),
            ));
        }
        if iw != patch_size || ih != patch_size {
            return Err(Error::patch(
                &rec.id,
                format!("raster is {iw}x{ih}, expected {patch_size}x{patch_size}"),
            ));
        }
        let fold = rec.fold;
        let id = rec.id.clone();
        patches.push(Patch {
            id: rec.id,
            region_id: rec.region_id,
            offset: (rec.offset[0], rec.offset[1]),
            pad: (rec.pad[0], rec.pad[1]),
            size: patch_size,
            image,
            labelmap,
            role: rec.role,
        });
        if let Some(f) = fold {
            folds.insert(id, f);
        }
    }
    let mut manifest = DatasetManifest::from_patches(meta.classes, patch_size, patches)?;
    manifest.folds = folds;
    manifest.validate()?;
    Ok(manifest)
}

pub fn save_regions(regions: &[LabeledRegion], classes: &ClassList, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    create_dir(&dir.join("images"))?;
    create_dir(&dir.join("labels"))?;
    write_json(
        &dir.join(DATASET_META_FILE),
        &DatasetMeta {
            classes: classes.clone(),
            patch_size: None,
        },
    )?;
    let mut records = Vec::with_capacity(regions.len());
    for r in regions {
        let image_path = format!("images/{}.png", r.id);
        let label_path = format!("labels/{}.png", r.id);
        save_rgb(&dir.join(&image_path), r.width, r.height, &r.image)?;
        save_gray(&dir.join(&label_path), r.width, r.height, &r.labelmap)?;
        records.push(RegionRecord {
            id: r.id.clone(),
            height: r.height,
            width: r.width,
            image_path,
            label_path,
        });
    }
    write_jsonl(&dir.join(REGIONS_FILE), &records)
}

pub fn load_regions(dir: impl AsRef<Path>) -> Result<(ClassList, Vec<LabeledRegion>)> {
    let dir = dir.as_ref();
    let meta = read_meta(dir)?;
    let records: Vec<RegionRecord> = read_jsonl(&dir.join(REGIONS_FILE))?;
    let mut regions = Vec::with_capacity(records.len());
    for rec in records {
        let fail = |reason: String| Error::InvalidRegion {
            region_id: rec.id.clone(),
            reason,
        };
        let (iw, ih, image) = load_rgb(&dir.join(&rec.image_path)).map_err(fail)?;
        let (lw, lh, labelmap) = load_gray(&dir.join(&rec.label_path)).map_err(fail)?;
        if (iw, ih) != (rec.width, rec.height) || (lw, lh) != (rec.width, rec.height) {
            return Err(fail(format!(
                "rasters are {iw}x{ih} and {lw}x{lh}, record says {}x{}",
                rec.width, rec.height
            )));
        }
        regions.push(LabeledRegion::new(
            rec.id.clone(),
            rec.height,
            rec.width,
            image,
            labelmap,
            &meta.classes,
        )?);
    }
    Ok((meta.classes, regions))
}

/// Predictions are stored one PNG per patch with bit `c - 1` set where
/// class `c` is predicted, so up to eight classes fit one byte.
pub fn save_predictions(dir: impl AsRef<Path>, preds: &[(String, BinaryMasks)]) -> Result<()> {
    let dir = dir.as_ref();
    create_dir(dir)?;
    for (id, masks) in preds {
        if masks.classes() > 8 {
            return Err(Error::InvalidArgument(format!(
                "prediction bitmask PNGs hold at most 8 classes, got {}",
                masks.classes()
            )));
        }
        let n = masks.height() * masks.width();
        let mut bits = vec![0u8; n];
        for c in 0..masks.classes() {
            for (b, &on) in bits.iter_mut().zip(masks.channel(c)) {
                if on {
                    *b |= 1 << c;
                }
            }
        }
        save_gray(&dir.join(format!("{id}.png")), masks.width(), masks.height(), &bits)?;
    }
    Ok(())
}

pub fn load_prediction(dir: impl AsRef<Path>, patch_id: &str, classes: usize) -> Result<BinaryMasks> {
    let path: PathBuf = dir.as_ref().join(format!("{patch_id}.png"));
    let (w, h, bits) = load_gray(&path).map_err(|m| Error::patch(patch_id, m))?;
    if classes > 8 {
        return Err(Error::InvalidArgument(format!("bitmask predictions support at most 8 classes, got {classes}")));
    }
    let mut data = vec![false; classes * w * h];
    for c in 0..classes {
        for (i, &b) in bits.iter().enumerate() {
            data[c * w * h + i] = b & (1 << c) != 0;
        }
    }
    BinaryMasks::new(classes, h, w, data)
}
