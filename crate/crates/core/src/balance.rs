//! Positive-negative sample ratio balancing.
//!
//! A patch is positive if it holds any foreground pixel and negative if it
//! holds any background pixel; mixed patches count in both. OoD patches are
//! purely negative, so adding `n` of them to an ID set with `pos`/`neg`
//! counts gives a ratio of `pos / (neg + n)` no matter which `n` are drawn.
//! The objective over the percentage grid is therefore evaluated in closed
//! form on counts before any sampling happens.

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::dataset::{sample_polarity, DatasetManifest};
use crate::error::{Error, Result};
use crate::seed::stage_rng;

pub const DEFAULT_PNR_OPT: f64 = 0.65;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PolarityCounts {
    pub positives: usize,
    pub negatives: usize,
}

pub fn polarity_counts(dataset: &DatasetManifest) -> PolarityCounts {
    dataset.patches.iter().fold(PolarityCounts::default(), |mut acc, p| {
        let pol = sample_polarity(p);
        acc.positives += pol.positive as usize;
        acc.negatives += pol.negative as usize;
        acc
    })
}

pub fn pnr_from_counts(positives: usize, negatives: usize) -> Result<f64> {
    if negatives == 0 {
        return Err(Error::NoNegatives);
    }
    Ok(positives as f64 / negatives as f64)
}

/// `|positives| / |negatives|` of a dataset.
pub fn compute_pnr(dataset: &DatasetManifest) -> Result<f64> {
    let c = polarity_counts(dataset);
    pnr_from_counts(c.positives, c.negatives)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BalanceConfig {
    pub pnr_opt: f64,
    /// Candidate percentages, strictly increasing in `[0, 1]`.
    pub grid: Vec<f64>,
    pub seed: u64,
}

impl Default for BalanceConfig {
    fn default() -> Self {
        Self {
            pnr_opt: DEFAULT_PNR_OPT,
            grid: default_grid(),
            seed: 0,
        }
    }
}

impl BalanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.pnr_opt > 0.0 && self.pnr_opt.is_finite()) {
            return Err(Error::InvalidArgument(format!("pnr_opt must be positive, got {}", self.pnr_opt)));
        }
        if self.grid.is_empty() {
            return Err(Error::InvalidArgument("percentage grid is empty".into()));
        }
        if let Some(v) = self.grid.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("grid value {v} outside [0, 1]")));
        }
        if self.grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument("grid must be strictly increasing".into()));
        }
        Ok(())
    }
}

fn snap(v: f64) -> f64 {
    (v * 1e9).round() / 1e9
}

/// `{0.0, 0.1, …, 1.0}`.
pub fn default_grid() -> Vec<f64> {
    (0..=10).map(|i| snap(i as f64 * 0.1)).collect()
}

/// Parses `start:end:step` (inclusive end), e.g. `0:1:0.1`.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    let bad = || Error::InvalidArgument(format!("grid {spec:?} is not start:end:step"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let nums: Vec<f64> = parts
        .iter()
        .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    let (start, end, step) = (nums[0], nums[1], nums[2]);
    if !(step > 0.0) || end < start {
        return Err(bad());
    }
    let steps = ((end - start) / step + 1e-9).floor() as usize;
    Ok((0..=steps).map(|i| snap(start + i as f64 * step)).collect())
}

/// `floor(pct * n)`, tolerant of representation error in `pct`.
pub fn ood_sample_count(pct: f64, n_ood: usize) -> usize {
    (pct * n_ood as f64 + 1e-9).floor() as usize
}

fn check_pct(pct: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&pct) {
        return Err(Error::InvalidArgument(format!("percentage {pct} outside [0, 1]")));
    }
    Ok(())
}

/// `|pos_id / (neg_id + floor(pct * n_ood)) - pnr_opt|`.
pub fn balance_objective_counts(pct: f64, id: PolarityCounts, n_ood: usize, pnr_opt: f64) -> Result<f64> {
    check_pct(pct)?;
    let pnr = pnr_from_counts(id.positives, id.negatives + ood_sample_count(pct, n_ood))?;
    Ok((pnr - pnr_opt).abs())
}

fn require_pure_negatives(d_ood: &DatasetManifest) -> Result<()> {
    match d_ood.patches.iter().find(|p| p.has_foreground()) {
        Some(p) => Err(Error::patch(&p.id, "OoD set contains a patch with foreground labels")),
        None => Ok(()),
    }
}

pub fn balance_objective(pct: f64, d_ood: &DatasetManifest, d_id: &DatasetManifest, pnr_opt: f64) -> Result<f64> {
    require_pure_negatives(d_ood)?;
    balance_objective_counts(pct, polarity_counts(d_id), d_ood.len(), pnr_opt)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub pct: f64,
    pub n_ood: usize,
    pub pnr: f64,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    /// Counts of the ID training set.
    pub pos_count: usize,
    pub neg_count: usize,
    pub ood_available: usize,
    pub pnr_opt: f64,
    /// Ratio and distance of the ID set alone.
    pub baseline_pnr: f64,
    pub baseline_delta_pnr: f64,
    pub pct_opt: f64,
    pub ood_selected: usize,
    /// Ratio of the combined set at `pct_opt`.
    pub pnr: f64,
    pub delta_pnr: f64,
    pub objective_curve: Vec<CurvePoint>,
}

/// Grid search of the balance objective; ties go to the smallest pct.
pub fn estimate_pct_opt_counts(id: PolarityCounts, n_ood: usize, config: &BalanceConfig) -> Result<BalanceReport> {
    config.validate()?;
    let baseline_pnr = pnr_from_counts(id.positives, id.negatives)?;
    let mut curve: Vec<CurvePoint> = Vec::with_capacity(config.grid.len());
    let mut best: Option<usize> = None;
    for &pct in &config.grid {
        let n = ood_sample_count(pct, n_ood);
        let pnr = pnr_from_counts(id.positives, id.negatives + n)?;
        let objective = (pnr - config.pnr_opt).abs();
        if best.is_none_or(|b: usize| objective < curve[b].objective) {
            best = Some(curve.len());
        }
        curve.push(CurvePoint {
            pct,
            n_ood: n,
            pnr,
            objective,
        });
    }
    let b = &curve[best.expect("grid is non-empty")];
    Ok(BalanceReport {
        pos_count: id.positives,
        neg_count: id.negatives,
        ood_available: n_ood,
        pnr_opt: config.pnr_opt,
        baseline_pnr,
        baseline_delta_pnr: (baseline_pnr - config.pnr_opt).abs(),
        pct_opt: b.pct,
        ood_selected: b.n_ood,
        pnr: b.pnr,
        delta_pnr: b.objective,
        objective_curve: curve,
    })
}

pub fn estimate_pct_opt(d_ood: &DatasetManifest, d_id: &DatasetManifest, config: &BalanceConfig) -> Result<BalanceReport> {
    require_pure_negatives(d_ood)?;
    estimate_pct_opt_counts(polarity_counts(d_id), d_ood.len(), config)
}

/// Draws `floor(pct * |d_ood|)` patches uniformly without replacement.
/// The selection keeps the input order.
pub fn sample_ood(d_ood: &DatasetManifest, pct: f64, seed: u64) -> Result<DatasetManifest> {
    check_pct(pct)?;
    let k = ood_sample_count(pct, d_ood.len());
    let mut picked = index::sample(&mut stage_rng(seed, "sample-ood"), d_ood.len(), k).into_vec();
    picked.sort_unstable();
    let chosen: std::collections::HashSet<&str> = picked.iter().map(|&i| d_ood.patches[i].id.as_str()).collect();
    Ok(d_ood.filter(|p| chosen.contains(p.id.as_str())))
}

/// Concatenates both sets and applies a seeded uniform permutation.
pub fn combine_and_shuffle(d_ood_opt: &DatasetManifest, d_id: &DatasetManifest, seed: u64) -> Result<DatasetManifest> {
    if d_ood_opt.classes != d_id.classes || d_ood_opt.patch_size != d_id.patch_size {
        return Err(Error::Shape("ID and OoD sets differ in classes or patch size".into()));
    }
    let mut patches = Vec::with_capacity(d_id.len() + d_ood_opt.len());
    patches.extend(d_id.patches.iter().cloned());
    patches.extend(d_ood_opt.patches.iter().cloned());
    patches.shuffle(&mut stage_rng(seed, "combine"));
    let mut out = DatasetManifest::from_patches(d_id.classes.clone(), d_id.patch_size, patches)?;
    out.folds = d_id.folds.iter().chain(&d_ood_opt.folds).map(|(k, v)| (k.clone(), *v)).collect();
    Ok(out)
}

/// Writes a report as pretty JSON.
pub fn write_report(path: impl AsRef<std::path::Path>, report: &BalanceReport) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(report).map_err(|e| Error::format(path, e))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_report(path: impl AsRef<std::path::Path>) -> Result<BalanceReport> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(positives: usize, negatives: usize) -> PolarityCounts {
        PolarityCounts { positives, negatives }
    }

    #[test]
    fn objective_worked_examples() {
        let id = counts(65, 40);
        assert_eq!(balance_objective_counts(0.6, id, 100, 0.65).unwrap(), 0.0);
        assert!((balance_objective_counts(0.0, id, 100, 0.65).unwrap() - 0.975).abs() < 1e-12);
        let v = balance_objective_counts(1.0, id, 100, 0.65).unwrap();
        assert!((v - (65.0 / 140.0 - 0.65f64).abs()).abs() < 1e-12);
        assert!((v - 0.1857).abs() < 1e-4);
        assert!(balance_objective_counts(1.1, id, 100, 0.65).is_err());
    }

    #[test]
    fn estimate_picks_exact_balance() {
        let r = estimate_pct_opt_counts(counts(65, 40), 100, &BalanceConfig::default()).unwrap();
        assert_eq!(r.pct_opt, 0.6);
        assert_eq!(r.delta_pnr, 0.0);
        assert_eq!(r.objective_curve.len(), 11);
    }

    #[test]
    fn already_balanced_set_adds_nothing() {
        let r = estimate_pct_opt_counts(counts(50, 100), 500, &BalanceConfig::default()).unwrap();
        assert_eq!(r.pct_opt, 0.0);
        assert_eq!(r.ood_selected, 0);
    }

    #[test]
    fn ties_go_to_smallest_pct() {
        // No OoD at all: every grid point has the same objective.
        let r = estimate_pct_opt_counts(counts(10, 10), 0, &BalanceConfig::default()).unwrap();
        assert_eq!(r.pct_opt, 0.0);
    }

    #[test]
    fn zero_negatives_is_an_error() {
        assert!(matches!(pnr_from_counts(3, 0), Err(Error::NoNegatives)));
        assert!(estimate_pct_opt_counts(counts(3, 0), 0, &BalanceConfig::default()).is_err());
    }

    #[test]
    fn grid_parsing() {
        assert_eq!(parse_grid("0:1:0.1").unwrap(), default_grid());
        assert_eq!(parse_grid("0.4:1:0.1").unwrap().len(), 7);
        assert!(parse_grid("0:1").is_err());
        assert!(parse_grid("1:0:0.1").is_err());
        let bad = BalanceConfig {
            grid: vec![0.5, 0.2],
            ..BalanceConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn sample_count_floors() {
        assert_eq!(ood_sample_count(0.6, 9684), 5810);
        assert_eq!(ood_sample_count(1.0, 9684), 9684);
        assert_eq!(ood_sample_count(0.0, 9684), 0);
        assert_eq!(ood_sample_count(0.7, 10), 7);
        assert_eq!(ood_sample_count(0.3, 10), 3);
    }
}
