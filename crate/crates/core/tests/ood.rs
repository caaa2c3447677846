mod common;

use medood::dataset::patchify;
use medood::metrics::BinaryMasks;
use medood::ood::{
    background_mean, build_unfiltered, prune_ood, remove_foreground, score_ood, MaskPredictor, RemovalKind,
    RemovalStrategy, ThresholdedModel,
};
use medood::pipeline::build_dataset;
use medood::segtrain::{train, TrainConfig};
use medood::synth::{generate_synthetic, SynthConfig};
use medood::{ClassList, DatasetManifest, Patch, Role};
use proptest::prelude::*;

use common::patch;

/// Fires `active[i]` classes (the first ones) on the i-th patch it sees.
struct FixedPredictor {
    classes: usize,
    active: Vec<usize>,
    seen: usize,
}

impl MaskPredictor for FixedPredictor {
    fn predict_masks(&mut self, patches: &[&Patch]) -> medood::Result<Vec<BinaryMasks>> {
        Ok(patches
            .iter()
            .map(|p| {
                let mut m = BinaryMasks::empty(self.classes, p.size, p.size);
                for c in 0..self.active[self.seen] {
                    m.channel_mut(c)[0] = true;
                }
                self.seen += 1;
                m
            })
            .collect())
    }
}

struct AlwaysEmpty(usize);

impl MaskPredictor for AlwaysEmpty {
    fn predict_masks(&mut self, patches: &[&Patch]) -> medood::Result<Vec<BinaryMasks>> {
        Ok(patches.iter().map(|p| BinaryMasks::empty(self.0, p.size, p.size)).collect())
    }
}

fn ood_set(n: usize, classes: usize) -> DatasetManifest {
    let patches = (0..n).map(|i| patch(&format!("c{i}"), 4, vec![0; 16], Role::Ood)).collect();
    DatasetManifest::from_patches(ClassList::numbered(classes).unwrap(), 4, patches).unwrap()
}

#[test]
fn keeps_exactly_scores_below_one() {
    // 10 classes: 1 active class scores 0.9, 5 score 0.5.
    let set = ood_set(5, 10);
    let mut pred = FixedPredictor {
        classes: 10,
        active: vec![0, 1, 0, 5, 0],
        seen: 0,
    };
    let (kept, scores) = prune_ood(&mut pred, &set).unwrap();
    let s: Vec<f64> = scores.iter().map(|s| s.score).collect();
    assert_eq!(s, vec![1.0, 0.9, 1.0, 0.5, 1.0]);
    let ids: Vec<&str> = kept.patches.iter().map(|p| p.id.as_str()).collect();
    assert_eq!(ids, vec!["c1", "c3"]);
    assert!(scores.iter().all(|s| s.kept == (s.score < 1.0)));
    assert_eq!(kept.patches[0], set.patches[1]);
}

#[test]
fn score_examples() {
    let set = ood_set(1, 6);
    let p = &set.patches[0];
    let classes = ClassList::numbered(6).unwrap();
    let s = score_ood(&mut AlwaysEmpty(6), p, &classes).unwrap();
    assert_eq!((s.score, s.kept), (1.0, false));
    let mut one = FixedPredictor {
        classes: 6,
        active: vec![1],
        seen: 0,
    };
    let s = score_ood(&mut one, p, &classes).unwrap();
    assert!((s.score - 5.0 / 6.0).abs() < 1e-12);
    assert!(s.kept);
    let mut all = FixedPredictor {
        classes: 6,
        active: vec![6],
        seen: 0,
    };
    assert_eq!(score_ood(&mut all, p, &classes).unwrap().score, 0.0);
}

#[test]
fn always_empty_prunes_everything() {
    let set = ood_set(7, 3);
    let (kept, scores) = prune_ood(&mut AlwaysEmpty(3), &set).unwrap();
    assert!(kept.is_empty());
    assert_eq!(scores.len(), 7);
    assert!(prune_ood(&mut AlwaysEmpty(3), &ood_set(0, 3)).is_err());
}

#[test]
fn fallback_uses_dataset_background_mean() {
    let cfg = SynthConfig {
        regions: 4,
        min_size: 40,
        max_size: 56,
        seed: 2,
        ..SynthConfig::default()
    };
    let regions = generate_synthetic(&cfg).unwrap();
    let mut patches = Vec::new();
    for r in &regions {
        patches.extend(patchify(r, 16).unwrap());
    }
    let mean = background_mean(&patches);
    assert_eq!(mean, medood::synth::background_mean(&regions));
    let full = patch("full", 3, vec![2; 9], Role::Id);
    for kind in [RemovalKind::MeanFill, RemovalKind::NearestInpaint] {
        let out = remove_foreground(&full, &RemovalStrategy::new(kind, mean));
        assert!(out.image.chunks_exact(3).all(|px| px == mean));
        assert!(out.labelmap.iter().all(|&v| v == 0));
    }
}

fn nearest_oracle(p: &Patch, i: usize) -> usize {
    let s = p.size;
    (0..s * s)
        .filter(|&j| p.labelmap[j] == 0 && !p.is_padding(j / s, j % s))
        .min_by_key(|&j| {
            let dy = (j / s) as i64 - (i / s) as i64;
            let dx = (j % s) as i64 - (i % s) as i64;
            (dy * dy + dx * dx, j)
        })
        .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn nearest_inpaint_matches_exhaustive_search(
        size in 2usize..9,
        seed in any::<u64>(),
        fg_rate in 0.05f64..0.95,
        pad_rows in 0usize..3,
        pad_cols in 0usize..3,
    ) {
        let mut x = seed;
        let mut next = || { x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); (x >> 33) as u32 };
        let mut p = patch("q", size, vec![0; size * size], Role::Id);
        p.pad = (pad_rows.min(size - 1), pad_cols.min(size - 1));
        for i in 0..size * size {
            if p.is_padding(i / size, i % size) {
                p.image[i * 3..i * 3 + 3].fill(0);
                continue;
            }
            for k in 0..3 { p.image[i * 3 + k] = next() as u8; }
            if (next() % 1000) as f64 / 1000.0 < fg_rate { p.labelmap[i] = 1 + (next() % 3) as u8; }
        }
        let out = remove_foreground(&p, &RemovalStrategy::new(RemovalKind::NearestInpaint, [7, 7, 7]));
        let has_source = (0..size * size).any(|j| p.labelmap[j] == 0 && !p.is_padding(j / size, j % size));
        for i in 0..size * size {
            let px = &out.image[i * 3..i * 3 + 3];
            if p.labelmap[i] == 0 {
                prop_assert_eq!(px, &p.image[i * 3..i * 3 + 3]);
            } else if has_source {
                let j = nearest_oracle(&p, i);
                prop_assert_eq!(px, &p.image[j * 3..j * 3 + 3]);
            } else {
                prop_assert_eq!(px, &[7, 7, 7]);
            }
        }
        prop_assert!(out.labelmap.iter().all(|&v| v == 0));
        prop_assert_eq!(out.role, Role::Ood);
        prop_assert_eq!((out.region_id.as_str(), out.offset, out.pad), (p.region_id.as_str(), p.offset, p.pad));
        prop_assert_eq!(remove_foreground(&out, &RemovalStrategy::new(RemovalKind::NearestInpaint, [7, 7, 7])), out.clone());
    }

    #[test]
    fn mean_fill_uses_patch_background(size in 2usize..7, seed in any::<u64>()) {
        let mut x = seed;
        let mut next = || { x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); (x >> 33) as u32 };
        let mut p = patch("q", size, vec![0; size * size], Role::Id);
        for i in 0..size * size {
            for k in 0..3 { p.image[i * 3 + k] = next() as u8; }
            p.labelmap[i] = (next() % 2) as u8;
        }
        let bg: Vec<usize> = (0..size * size).filter(|&i| p.labelmap[i] == 0).collect();
        prop_assume!(!bg.is_empty());
        let expect: Vec<u8> = (0..3)
            .map(|k| (bg.iter().map(|&i| p.image[i * 3 + k] as f64).sum::<f64>() / bg.len() as f64).round() as u8)
            .collect();
        let out = remove_foreground(&p, &RemovalStrategy::new(RemovalKind::MeanFill, [0; 3]));
        for i in 0..size * size {
            if p.labelmap[i] > 0 {
                prop_assert_eq!(&out.image[i * 3..i * 3 + 3], &expect[..]);
            }
        }
    }
}

fn kept_fraction(cue_rate: f64) -> (f64, usize, usize, usize) {
    let synth = SynthConfig {
        regions: 12,
        min_size: 48,
        max_size: 64,
        cue_rate,
        seed: 31,
        ..SynthConfig::default()
    };
    let data = build_dataset(synth.class_list().unwrap(), &generate_synthetic(&synth).unwrap(), 32, 3, 5).unwrap();
    let id_train = data.train_split(0);
    let (mut model, _) = train(
        &id_train,
        &TrainConfig {
            epochs: 12,
            seed: 3,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    let strategy = RemovalStrategy::new(RemovalKind::NearestInpaint, background_mean(&id_train.patches));
    let unfiltered = build_unfiltered(&id_train, &strategy).unwrap();
    assert!(unfiltered.patches.iter().all(|p| p.role == Role::Ood && p.labelmap.iter().all(|&v| v == 0)));
    let (kept, _) = prune_ood(
        &mut ThresholdedModel {
            model: &mut model,
            tau: 0.5,
        },
        &unfiltered,
    )
    .unwrap();
    assert!(kept.patches.iter().all(|p| p.labelmap.iter().all(|&v| v == 0)));
    (
        kept.len() as f64 / unfiltered.len() as f64,
        kept.len(),
        unfiltered.len(),
        id_train.len(),
    )
}

#[test]
fn spurious_cues_raise_the_kept_fraction() {
    let (with_cue, kept, unfiltered, id_train) = kept_fraction(0.3);
    let (without, ..) = kept_fraction(0.0);
    assert!(kept <= unfiltered && unfiltered <= id_train);
    assert!(with_cue > without, "kept fraction {with_cue} with cues vs {without} without");
}
