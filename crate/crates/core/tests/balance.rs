mod common;

use std::collections::BTreeSet;

use medood::balance::{
    balance_objective, balance_objective_counts, combine_and_shuffle, compute_pnr, estimate_pct_opt,
    estimate_pct_opt_counts, polarity_counts, sample_ood, BalanceConfig, PolarityCounts,
};
use medood::{ClassList, DatasetManifest, Error, Role};
use proptest::prelude::*;

use common::{counted_sets, patch};

#[test]
fn pnr_examples() {
    let (id, _) = counted_sets(2, 1, 1, 0);
    assert_eq!(compute_pnr(&id).unwrap(), 1.5);
    let (id, _) = counted_sets(5, 5, 0, 0);
    assert_eq!(compute_pnr(&id).unwrap(), 1.0);
    let (id, _) = counted_sets(4, 0, 0, 0);
    assert!(matches!(compute_pnr(&id), Err(Error::NoNegatives)));
}

#[test]
fn ood_patches_count_only_as_negatives() {
    let (id, ood) = counted_sets(3, 0, 0, 3);
    let both = combine_and_shuffle(&ood, &id, 0).unwrap();
    assert_eq!(
        polarity_counts(&both),
        PolarityCounts {
            positives: 3,
            negatives: 3
        }
    );
}

#[test]
fn objective_rejects_labelled_ood() {
    let (id, _) = counted_sets(3, 1, 0, 0);
    let bad = DatasetManifest::from_patches(
        ClassList::numbered(1).unwrap(),
        2,
        vec![patch("x", 2, vec![0, 0, 0, 0], Role::Ood)],
    )
    .unwrap();
    assert!(balance_objective(0.5, &bad, &id, 0.65).is_ok());
    let mut labelled = bad.clone();
    labelled.patches[0].labelmap[0] = 1;
    assert!(balance_objective(0.5, &labelled, &id, 0.65).is_err());
}

#[test]
fn objective_on_manifests_matches_spec_arithmetic() {
    let (id, ood) = counted_sets(65, 40, 0, 100);
    assert_eq!(balance_objective(0.6, &ood, &id, 0.65).unwrap(), 0.0);
    assert!((balance_objective(0.0, &ood, &id, 0.65).unwrap() - 0.975).abs() < 1e-12);
    assert!((balance_objective(1.0, &ood, &id, 0.65).unwrap() - 0.185_714_285_714).abs() < 1e-9);
    let r = estimate_pct_opt(&ood, &id, &BalanceConfig::default()).unwrap();
    assert_eq!(r.pct_opt, 0.6);
    assert_eq!(r.delta_pnr, 0.0);
    assert_eq!(r.ood_selected, 60);
}

#[test]
fn sampling_sizes() {
    let (_, ood) = counted_sets(0, 0, 0, 9684);
    assert_eq!(sample_ood(&ood, 1.0, 3).unwrap(), ood);
    assert!(sample_ood(&ood, 0.0, 3).unwrap().is_empty());
    let chosen = sample_ood(&ood, 0.6, 3).unwrap();
    assert_eq!(chosen.len(), 5810);
    assert!(sample_ood(&ood, -0.1, 3).is_err());
}

#[test]
fn sampling_is_seeded_and_without_replacement() {
    let (_, ood) = counted_sets(0, 0, 0, 200);
    let a = sample_ood(&ood, 0.3, 11).unwrap();
    let b = sample_ood(&ood, 0.3, 11).unwrap();
    let c = sample_ood(&ood, 0.3, 12).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    let ids: BTreeSet<&str> = a.patches.iter().map(|p| p.id.as_str()).collect();
    assert_eq!(ids.len(), 60);
}

#[test]
fn combined_training_size() {
    let (id, ood) = counted_sets(6000, 6249, 0, 5810);
    assert_eq!(id.len(), 12249);
    let combined = combine_and_shuffle(&ood, &id, 0).unwrap();
    assert_eq!(combined.len(), 18059);
    assert_eq!(combined.count_role(Role::Ood), 5810);
}

#[test]
fn combine_permutes_deterministically() {
    let (id, ood) = counted_sets(20, 20, 10, 30);
    let a = combine_and_shuffle(&ood, &id, 5).unwrap();
    let b = combine_and_shuffle(&ood, &id, 5).unwrap();
    let c = combine_and_shuffle(&ood, &id, 6).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.patches, c.patches);
    let mut ids: Vec<&str> = a.patches.iter().map(|p| p.id.as_str()).collect();
    ids.sort_unstable();
    let mut expect: Vec<&str> = id.patches.iter().chain(&ood.patches).map(|p| p.id.as_str()).collect();
    expect.sort_unstable();
    assert_eq!(ids, expect);
}

#[test]
fn combine_with_empty_ood_is_a_permutation() {
    let (id, _) = counted_sets(10, 10, 10, 0);
    let empty = DatasetManifest::new(id.classes.clone(), id.patch_size);
    let out = combine_and_shuffle(&empty, &id, 1).unwrap();
    assert_eq!(out.len(), id.len());
    assert_ne!(out.patches, id.patches);
    let mut a = out.patches.clone();
    let mut b = id.patches.clone();
    a.sort_by(|x, y| x.id.cmp(&y.id));
    b.sort_by(|x, y| x.id.cmp(&y.id));
    assert_eq!(a, b);
}

#[test]
fn combine_rejects_id_collisions() {
    let (id, _) = counted_sets(2, 2, 0, 0);
    let clash = DatasetManifest::from_patches(
        id.classes.clone(),
        2,
        vec![patch("p0", 2, vec![0; 4], Role::Ood)],
    )
    .unwrap();
    assert!(matches!(combine_and_shuffle(&clash, &id, 0), Err(Error::DuplicateId(_))));
}

/// Independent grid evaluation in integer arithmetic: pct = i/10, so the
/// sample count is floor(i * n / 10).
fn brute_force(pos: usize, neg: usize, n_ood: usize, pnr_opt: f64) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for i in 0..=10 {
        let add = i * n_ood / 10;
        let f = (pos as f64 / (neg + add) as f64 - pnr_opt).abs();
        if f < best.1 {
            best = (i, f);
        }
    }
    best
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn estimate_matches_brute_force(pos in 0usize..20_000, neg in 1usize..20_000, n_ood in 0usize..20_000, pnr_opt in 0.05f64..2.0) {
        let r = estimate_pct_opt_counts(PolarityCounts { positives: pos, negatives: neg }, n_ood, &BalanceConfig { pnr_opt, ..BalanceConfig::default() }).unwrap();
        let (i, f) = brute_force(pos, neg, n_ood, pnr_opt);
        prop_assert_eq!(r.pct_opt, i as f64 / 10.0);
        prop_assert_eq!(r.delta_pnr, f);
        prop_assert_eq!(r.objective_curve.len(), 11);
        prop_assert_eq!(r.delta_pnr, r.objective_curve.iter().find(|c| c.pct == r.pct_opt).unwrap().objective);
    }

    #[test]
    fn improvement_and_monotonicity(pos in 0usize..5_000, neg in 1usize..5_000, n_ood in 0usize..5_000, pnr_opt in 0.05f64..2.0) {
        let r = estimate_pct_opt_counts(PolarityCounts { positives: pos, negatives: neg }, n_ood, &BalanceConfig { pnr_opt, ..BalanceConfig::default() }).unwrap();
        prop_assert!(r.delta_pnr <= r.baseline_delta_pnr);
        for w in r.objective_curve.windows(2) {
            prop_assert!(w[1].pnr <= w[0].pnr);
        }
        if r.baseline_pnr <= pnr_opt {
            prop_assert_eq!(r.pct_opt, 0.0);
        }
    }

    #[test]
    fn closed_form_equals_materialized_ratio(
        pos_only in 0usize..25, neg_only in 0usize..25, mixed in 0usize..25, n_ood in 0usize..40,
        pct in 0.0f64..=1.0, seed in any::<u64>(), pnr_opt in 0.1f64..1.5,
    ) {
        prop_assume!(neg_only + mixed + n_ood > 0);
        let (id, ood) = counted_sets(pos_only, neg_only, mixed, n_ood);
        let chosen = sample_ood(&ood, pct, seed).unwrap();
        let combined = combine_and_shuffle(&chosen, &id, seed).unwrap();
        let counts = polarity_counts(&id);
        match balance_objective_counts(pct, counts, n_ood, pnr_opt) {
            Ok(f) => prop_assert_eq!(f, (compute_pnr(&combined).unwrap() - pnr_opt).abs()),
            Err(Error::NoNegatives) => prop_assert!(compute_pnr(&combined).is_err()),
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        }
        prop_assert_eq!(balance_objective(pct, &ood, &id, pnr_opt).ok(), balance_objective_counts(pct, counts, n_ood, pnr_opt).ok());
    }
}
