//! Synthetic stand-in for a nuclei segmentation dataset.
//!
//! Regions are a noisy tissue-like background with small elliptical objects
//! per class, each class drawn with its own colour and stripe texture. A
//! configurable fraction of the background is then repainted with a
//! "confuser" texture: the colour of one designated class, slightly
//! brighter, with crossed stripes, laid out around that class's objects.
//! The confuser is labelled background, so a model that keys on colour
//! alone produces false positives there.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::dataset::{ClassList, LabeledRegion};
use crate::error::{Error, Result};
use crate::seed::stage_rng;

const BACKGROUND_RGB: [f64; 3] = [222.0, 188.0, 208.0];
const BACKGROUND_NOISE: f64 = 12.0;

/// Base colours for the first classes; further classes cycle with an offset.
const CLASS_RGB: [[f64; 3]; 6] = [
    [196.0, 84.0, 122.0],
    [122.0, 72.0, 160.0],
    [64.0, 42.0, 118.0],
    [104.0, 52.0, 96.0],
    [150.0, 104.0, 182.0],
    [172.0, 112.0, 150.0],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub regions: usize,
    pub min_size: usize,
    pub max_size: usize,
    pub classes: Vec<String>,
    /// Expected fraction of region area covered by each class.
    pub densities: Vec<f64>,
    /// Fraction of background pixels repainted with the confuser texture.
    pub cue_rate: f64,
    /// 1-based class index the confuser imitates.
    pub cue_class: usize,
    /// Brightness added to the imitated class colour.
    pub cue_offset: f64,
    /// Stripes run perpendicular to the imitated class's instead of parallel.
    pub cue_crossed: bool,
    pub min_radius: f64,
    pub max_radius: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            regions: 24,
            min_size: 160,
            max_size: 256,
            classes: crate::dataset::LIZARD_CLASSES.iter().map(|s| s.to_string()).collect(),
            // Skewed like the Lizard class frequencies: two rare classes,
            // one mid, three common.
            densities: vec![0.004, 0.06, 0.05, 0.015, 0.004, 0.06],
            cue_rate: 0.3,
            cue_class: 6,
            cue_offset: 10.0,
            cue_crossed: true,
            min_radius: 2.5,
            max_radius: 5.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn class_list(&self) -> Result<ClassList> {
        ClassList::new(self.classes.iter().cloned())
    }

    pub fn validate(&self) -> Result<()> {
        let classes = self.class_list()?;
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.regions == 0 {
            return bad("synthetic region count must be positive".into());
        }
        if self.min_size == 0 || self.min_size > self.max_size {
            return bad(format!("invalid region size range {}..={}", self.min_size, self.max_size));
        }
        if self.densities.len() != classes.len() {
            return bad(format!(
                "{} densities given for {} classes",
                self.densities.len(),
                classes.len()
            ));
        }
        if let Some(d) = self.densities.iter().find(|d| !(0.0..=1.0).contains(*d)) {
            return bad(format!("density {d} outside [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.cue_rate) {
            return bad(format!("cue rate {} outside [0, 1]", self.cue_rate));
        }
        if self.cue_class == 0 || self.cue_class > classes.len() {
            return bad(format!("cue class {} outside 1..={}", self.cue_class, classes.len()));
        }
        if !(self.min_radius > 0.0 && self.min_radius <= self.max_radius) {
            return bad(format!("invalid radius range {}..={}", self.min_radius, self.max_radius));
        }
        Ok(())
    }
}

/// A generated region plus the mask of pixels carrying the confuser texture.
#[derive(Debug, Clone)]
pub struct SyntheticRegion {
    pub region: LabeledRegion,
    pub cue_mask: Vec<bool>,
}

impl SyntheticRegion {
    /// Fraction of background pixels that carry the confuser.
    pub fn cue_fraction(&self) -> f64 {
        let background = self.region.labelmap.iter().filter(|&&v| v == 0).count();
        if background == 0 {
            return 0.0;
        }
        self.cue_mask.iter().filter(|&&c| c).count() as f64 / background as f64
    }
}

pub fn generate_synthetic(config: &SynthConfig) -> Result<Vec<LabeledRegion>> {
    Ok(generate_synthetic_with_cues(config)?
        .into_iter()
        .map(|s| s.region)
        .collect())
}

pub fn generate_synthetic_with_cues(config: &SynthConfig) -> Result<Vec<SyntheticRegion>> {
    config.validate()?;
    let classes = config.class_list()?;
    (0..config.regions)
        .map(|i| {
            let id = format!("region_{i:04}");
            let mut rng = stage_rng(config.seed, &format!("synth/{id}"));
            let s = draw_region(config, &classes, &id, &mut rng);
            s.region.validate(&classes)?;
            Ok(s)
        })
        .collect()
}

#[derive(Clone, Copy)]
struct Texture {
    rgb: [f64; 3],
    // stripe wave vector (cycles per pixel)
    freq: (f64, f64),
    amplitude: f64,
    noise: f64,
}

fn class_texture(class: usize) -> Texture {
    let k = class - 1;
    let mut rgb = CLASS_RGB[k % CLASS_RGB.len()];
    let cycle = (k / CLASS_RGB.len()) as f64;
    for v in &mut rgb {
        *v = (*v + 23.0 * cycle) % 200.0 + 20.0 * cycle.min(1.0);
    }
    let angle = 0.9 * k as f64;
    let period = 3.0 + (k % 4) as f64;
    Texture {
        rgb,
        freq: (angle.cos() / period, angle.sin() / period),
        amplitude: 14.0,
        noise: 10.0,
    }
}

fn confuser_texture(config: &SynthConfig) -> Texture {
    let mut t = class_texture(config.cue_class);
    for v in &mut t.rgb {
        *v += config.cue_offset;
    }
    if config.cue_crossed {
        t.freq = (-t.freq.1, t.freq.0);
    }
    t
}

impl Texture {
    fn sample(&self, row: usize, col: usize, rng: &mut ChaCha8Rng) -> [u8; 3] {
        let phase = std::f64::consts::TAU * (row as f64 * self.freq.0 + col as f64 * self.freq.1);
        let wave = self.amplitude * phase.sin();
        let mut out = [0u8; 3];
        for (o, base) in out.iter_mut().zip(self.rgb) {
            let n = rng.random_range(-self.noise..=self.noise);
            *o = (base + wave + n).round().clamp(0.0, 255.0) as u8;
        }
        out
    }
}

fn draw_region(config: &SynthConfig, classes: &ClassList, id: &str, rng: &mut ChaCha8Rng) -> SyntheticRegion {
    let h = rng.random_range(config.min_size..=config.max_size);
    let w = rng.random_range(config.min_size..=config.max_size);
    let n = h * w;
    let mut image = vec![0u8; n * 3];
    let mut labelmap = vec![0u8; n];

    for px in image.chunks_exact_mut(3) {
        for (v, base) in px.iter_mut().zip(BACKGROUND_RGB) {
            let noise = rng.random_range(-BACKGROUND_NOISE..=BACKGROUND_NOISE);
            *v = (base + noise).round().clamp(0.0, 255.0) as u8;
        }
    }

    let mut cue_anchors = Vec::new();
    let mean_r = 0.5 * (config.min_radius + config.max_radius);
    let mean_area = std::f64::consts::PI * mean_r * mean_r;
    for class in 1..=classes.len() {
        let lambda = config.densities[class - 1] * n as f64 / mean_area;
        let count = if lambda > 0.0 {
            Poisson::new(lambda).map(|p| p.sample(rng) as usize).unwrap_or(0)
        } else {
            0
        };
        let texture = class_texture(class);
        for _ in 0..count {
            let cy = rng.random_range(0.0..h as f64);
            let cx = rng.random_range(0.0..w as f64);
            if class == config.cue_class {
                cue_anchors.push((cy, cx));
            }
            let ry = rng.random_range(config.min_radius..=config.max_radius);
            let rx = rng.random_range(config.min_radius..=config.max_radius);
            let r0 = (cy - ry).floor().max(0.0) as usize;
            let r1 = ((cy + ry).ceil() as usize).min(h - 1);
            let c0 = (cx - rx).floor().max(0.0) as usize;
            let c1 = ((cx + rx).ceil() as usize).min(w - 1);
            for r in r0..=r1 {
                for c in c0..=c1 {
                    let dy = (r as f64 + 0.5 - cy) / ry;
                    let dx = (c as f64 + 0.5 - cx) / rx;
                    let i = r * w + c;
                    // Objects never overlap: only background is painted.
                    if dy * dy + dx * dx <= 1.0 && labelmap[i] == 0 {
                        labelmap[i] = class as u8;
                        image[i * 3..i * 3 + 3].copy_from_slice(&texture.sample(r, c, rng));
                    }
                }
            }
        }
    }

    let mut cue_mask = vec![false; n];
    if config.cue_rate > 0.0 {
        let background: Vec<usize> = (0..n).filter(|&i| labelmap[i] == 0).collect();
        let target = (config.cue_rate * background.len() as f64).round() as usize;
        let field = smooth_field(h, w, &cue_anchors, rng);
        let mut ranked = background;
        // Highest field values first; index order breaks ties.
        ranked.sort_by(|&a, &b| field[b].total_cmp(&field[a]).then(a.cmp(&b)));
        let texture = confuser_texture(config);
        for &i in &ranked[..target] {
            cue_mask[i] = true;
            image[i * 3..i * 3 + 3].copy_from_slice(&texture.sample(i / w, i % w, rng));
        }
    }

    SyntheticRegion {
        region: LabeledRegion {
            id: id.to_string(),
            height: h,
            width: w,
            image,
            labelmap,
        },
        cue_mask,
    }
}

/// Sum of random Gaussian bumps plus a strong bump on every anchor;
/// thresholding it gives blob-shaped areas that hug the anchors, so the
/// confuser co-occurs with the class it imitates.
fn smooth_field(h: usize, w: usize, anchors: &[(f64, f64)], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let bumps = ((h * w) as f64 / 300.0).ceil() as usize;
    let mut params: Vec<(f64, f64, f64, f64)> = (0..bumps)
        .map(|_| {
            (
                rng.random_range(0.0..h as f64),
                rng.random_range(0.0..w as f64),
                rng.random_range(4.0..10.0),
                rng.random_range(-1.0..1.0),
            )
        })
        .collect();
    params.extend(anchors.iter().map(|&(cy, cx)| (cy, cx, 7.0, 2.0)));
    let mut field = vec![0.0; h * w];
    for (r, row) in field.chunks_exact_mut(w).enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = params
                .iter()
                .map(|&(cy, cx, sigma, amp)| {
                    let d2 = (r as f64 - cy).powi(2) + (c as f64 - cx).powi(2);
                    amp * (-d2 / (2.0 * sigma * sigma)).exp()
                })
                .sum();
        }
    }
    field
}

/// Mean RGB intensity of non-foreground pixels over a set of regions.
pub fn background_mean(regions: &[LabeledRegion]) -> [u8; 3] {
    let mut sum = [0u64; 3];
    let mut count = 0u64;
    for r in regions {
        for (i, _) in r.labelmap.iter().enumerate().filter(|(_, &v)| v == 0) {
            for (s, v) in sum.iter_mut().zip(&r.image[i * 3..i * 3 + 3]) {
                *s += u64::from(*v);
            }
            count += 1;
        }
    }
    if count == 0 {
        return [0; 3];
    }
    sum.map(|s| ((s as f64) / count as f64).round() as u8)
}
