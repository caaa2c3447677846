use std::path::Path;

use image::RgbImage;

use crate::dataset::Patch;
use crate::error::{Error, Result};
use crate::metrics::BinaryMasks;

/// Fixed colours, one per class index.
pub const PALETTE: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [255, 225, 25],
    [240, 50, 230],
    [70, 240, 240],
    [245, 130, 48],
    [145, 30, 180],
];

const ALPHA: f32 = 0.6;

fn paint(dst: &mut RgbImage, x0: u32, patch: &Patch, masks: Option<&BinaryMasks>) {
    let p = patch.size;
    for i in 0..p * p {
        let mut px = [patch.image[i * 3], patch.image[i * 3 + 1], patch.image[i * 3 + 2]];
        // Lowest class index wins where masks overlap.
        if let Some(c) = masks.and_then(|m| (0..m.classes()).find(|&c| m.channel(c)[i])) {
            for (v, k) in px.iter_mut().zip(PALETTE[c]) {
                *v = ((1.0 - ALPHA) * *v as f32 + ALPHA * k as f32).round() as u8;
            }
        }
        dst.put_pixel(x0 + (i % p) as u32, (i / p) as u32, image::Rgb(px));
    }
}

/// Side-by-side panels: input, ground truth, prediction.
pub fn render_overlay(patch: &Patch, pred: &BinaryMasks, gt: &BinaryMasks) -> Result<RgbImage> {
    let p = patch.size;
    for (name, m) in [("prediction", pred), ("ground truth", gt)] {
        if m.classes() > PALETTE.len() {
            return Err(Error::InvalidArgument(format!(
                "{name} has {} classes, palette holds {}",
                m.classes(),
                PALETTE.len()
            )));
        }
        if m.height() != p || m.width() != p {
            return Err(Error::Shape(format!(
                "{name} mask is {}x{}, patch {} is {p}x{p}",
                m.height(),
                m.width(),
                patch.id
            )));
        }
    }
    if pred.classes() != gt.classes() {
        return Err(Error::Shape(format!(
            "prediction has {} classes, ground truth {}",
            pred.classes(),
            gt.classes()
        )));
    }
    let mut img = RgbImage::new(3 * p as u32, p as u32);
    paint(&mut img, 0, patch, None);
    paint(&mut img, p as u32, patch, Some(gt));
    paint(&mut img, 2 * p as u32, patch, Some(pred));
    Ok(img)
}

pub fn save_overlay(path: impl AsRef<Path>, patch: &Patch, pred: &BinaryMasks, gt: &BinaryMasks) -> Result<()> {
    let path = path.as_ref();
    render_overlay(patch, pred, gt)?
        .save(path)
        .map_err(|e| Error::format(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Role;

    fn patch() -> Patch {
        Patch {
            id: "p".into(),
            region_id: "r".into(),
            offset: (0, 0),
            pad: (0, 0),
            size: 4,
            image: (0..48).map(|v| (v * 5) as u8).collect(),
            labelmap: vec![0, 1, 0, 0, 0, 2, 2, 0, 0, 0, 0, 0, 6, 0, 0, 0],
            role: Role::Id,
        }
    }

    fn panel(img: &RgbImage, k: u32) -> Vec<u8> {
        let mut out = Vec::new();
        for y in 0..4 {
            for x in 0..4 {
                out.extend_from_slice(&img.get_pixel(k * 4 + x, y).0);
            }
        }
        out
    }

    #[test]
    fn empty_prediction_shows_raw_image() {
        let p = patch();
        let gt = BinaryMasks::from_labelmap(&p.labelmap, 4, 4, 6).unwrap();
        let img = render_overlay(&p, &BinaryMasks::empty(6, 4, 4), &gt).unwrap();
        assert_eq!((img.width(), img.height()), (12, 4));
        assert_eq!(panel(&img, 0), p.image);
        assert_eq!(panel(&img, 2), p.image);
        assert_ne!(panel(&img, 1), p.image);
    }

    #[test]
    fn perfect_prediction_matches_ground_truth_panel() {
        let p = patch();
        let gt = BinaryMasks::from_labelmap(&p.labelmap, 4, 4, 6).unwrap();
        let img = render_overlay(&p, &gt, &gt).unwrap();
        assert_eq!(panel(&img, 1), panel(&img, 2));
        // Pixel 1 is class 1: blended with the first palette colour.
        let expect: Vec<u8> = (0..3)
            .map(|k| (0.4 * p.image[3 + k] as f32 + 0.6 * PALETTE[0][k] as f32).round() as u8)
            .collect();
        assert_eq!(&panel(&img, 1)[3..6], &expect[..]);
    }

    #[test]
    fn rejects_mismatched_masks() {
        let p = patch();
        let gt = BinaryMasks::empty(6, 4, 4);
        assert!(render_overlay(&p, &BinaryMasks::empty(5, 4, 4), &gt).is_err());
        assert!(render_overlay(&p, &BinaryMasks::empty(9, 4, 4), &BinaryMasks::empty(9, 4, 4)).is_err());
        assert!(render_overlay(&p, &BinaryMasks::empty(6, 2, 2), &gt).is_err());
    }
}
