//! End-to-end runs: data preparation, per-fold mining, balancing, training
//! and evaluation, plus the report files each run leaves behind.

mod config;
mod overlay;

pub use config::{ExperimentConfig, OodConfig, PipelineConfig};
pub use overlay::{render_overlay, save_overlay, PALETTE};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::balance::{
    combine_and_shuffle, compute_pnr, estimate_pct_opt, sample_ood, write_report, BalanceConfig, BalanceReport,
};
use crate::dataset::{patchify, split_folds, ClassList, DatasetManifest, LabeledRegion, Patch};
use crate::error::{Error, Result};
use crate::metrics::{aggregate, empty_predictor_miou, evaluate_patch, write_metrics_csv, BinaryMasks, MetricsReport, PatchMetrics};
use crate::ood::{build_unfiltered, prune_ood, write_scores_csv, RemovalStrategy, ThresholdedModel};
use crate::seed::derive_seed;
use crate::segtrain::{
    predict_batch, save_checkpoint, threshold, train, Checkpoint, SegmentationModel, TrainConfig, TrainHistory, TrainMode,
};
use crate::store::{load_regions, save_manifest};
use crate::synth::generate_synthetic;

pub const SUMMARY_FILE: &str = "summary.csv";
pub const INDEX_FILE: &str = "index.json";
pub const CONFIG_FILE: &str = "config.toml";

pub const METHOD_BASELINE: &str = "baseline";
pub const METHOD_MED_OOD: &str = "med-ood";
pub const METHOD_OOD_ONLY: &str = "ood-only";
pub const METHOD_FULL_OOD: &str = "med-ood-full";
pub const METHOD_BASELINE_NO_BN: &str = "baseline-no-bn";
pub const METHOD_MED_OOD_NO_BN: &str = "med-ood-no-bn";

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::format(path, e)
}

fn write_rows(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(header).map_err(csv_err(path))?;
    for r in rows {
        w.write_record(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

/// Predictions and scores of one model on one test set, sorted by patch id.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub patches: Vec<PatchMetrics>,
    pub report: MetricsReport,
    pub predictions: Vec<(String, BinaryMasks)>,
}

pub fn evaluate_masks(test: &DatasetManifest, predictions: Vec<(String, BinaryMasks)>) -> Result<Evaluation> {
    let by_id: std::collections::HashMap<&str, &Patch> = test.patches.iter().map(|p| (p.id.as_str(), p)).collect();
    let mut predictions = predictions;
    predictions.sort_by(|a, b| a.0.cmp(&b.0));
    let patches = predictions
        .iter()
        .map(|(id, pred)| {
            let p = by_id
                .get(id.as_str())
                .ok_or_else(|| Error::patch(id, "prediction has no matching test patch"))?;
            let gt = BinaryMasks::from_labelmap(&p.labelmap, p.size, p.size, test.classes.len())?;
            evaluate_patch(id.clone(), pred, &gt, &test.classes)
        })
        .collect::<Result<Vec<_>>>()?;
    let report = aggregate(&patches, &test.classes)?;
    Ok(Evaluation {
        patches,
        report,
        predictions,
    })
}

pub fn evaluate_model(model: &mut SegmentationModel, test: &DatasetManifest, tau: f64) -> Result<Evaluation> {
    let refs: Vec<&Patch> = test.patches.iter().collect();
    let probs = predict_batch(model, &refs)?;
    let preds = refs.iter().zip(&probs).map(|(p, pr)| (p.id.clone(), threshold(pr, tau))).collect();
    evaluate_masks(test, preds)
}

/// mIoU of a predictor that never outputs foreground.
pub fn oracle_empty_miou(test: &DatasetManifest) -> Result<f64> {
    let gts = test
        .patches
        .iter()
        .map(|p| BinaryMasks::from_labelmap(&p.labelmap, p.size, p.size, test.classes.len()))
        .collect::<Result<Vec<_>>>()?;
    empty_predictor_miou(&gts)
}

/// Number of patches containing each class.
pub fn class_presence(dataset: &DatasetManifest) -> Vec<usize> {
    let mut counts = vec![0; dataset.classes.len()];
    for p in &dataset.patches {
        let mut seen = vec![false; counts.len()];
        for &v in p.labelmap.iter().filter(|&&v| v > 0) {
            seen[v as usize - 1] = true;
        }
        for (c, s) in counts.iter_mut().zip(seen) {
            *c += s as usize;
        }
    }
    counts
}

/// Per-class patch counts of the ID and OoD training sets. Fails if any
/// OoD patch carries a class.
pub fn write_class_counts(path: impl AsRef<Path>, id: &DatasetManifest, ood: &DatasetManifest) -> Result<()> {
    let path = path.as_ref();
    let id_counts = class_presence(id);
    let ood_counts = class_presence(ood);
    if let Some(c) = ood_counts.iter().position(|&n| n > 0) {
        return Err(Error::InvalidArgument(format!(
            "OoD set contains {} patches of class {}",
            ood_counts[c],
            id.classes.names()[c]
        )));
    }
    let rows: Vec<Vec<String>> = id
        .classes
        .names()
        .iter()
        .zip(id_counts.iter().zip(&ood_counts))
        .map(|(name, (a, b))| vec![name.clone(), a.to_string(), b.to_string()])
        .collect();
    write_rows(path, &["class", "id_patches", "ood_patches"], &rows)
}

/// One IoU column per method, one row per class, then a `mean` row that
/// equals each method's mIoU.
pub fn per_class_report(path: impl AsRef<Path>, columns: &[(&str, &MetricsReport)], classes: &ClassList) -> Result<()> {
    let path = path.as_ref();
    if let Some((name, _)) = columns.iter().find(|(_, r)| r.per_class_iou.len() != classes.len()) {
        return Err(Error::Shape(format!("report {name} does not match the class list")));
    }
    let mut header = vec!["class"];
    header.extend(columns.iter().map(|(n, _)| *n));
    let mut rows: Vec<Vec<String>> = classes
        .names()
        .iter()
        .enumerate()
        .map(|(c, name)| {
            let mut r = vec![name.clone()];
            r.extend(columns.iter().map(|(_, rep)| fmt(rep.per_class_iou[c].1)));
            r
        })
        .collect();
    let mut mean = vec!["mean".to_string()];
    mean.extend(columns.iter().map(|(_, rep)| fmt(rep.miou)));
    rows.push(mean);
    write_rows(path, &header, &rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub pct: f64,
    pub n_ood: usize,
    /// Ratio of the materialized combined set.
    pub pnr: f64,
    pub miou: Option<f64>,
    pub dsc: Option<f64>,
}

/// Materializes the combined set for each percentage and measures its
/// ratio. With `train_eval`, also trains and scores a model on each set.
pub fn sweep_pnr(
    id_train: &DatasetManifest,
    d_ood: &DatasetManifest,
    pcts: &[f64],
    seed: u64,
    mut train_eval: Option<&mut dyn FnMut(f64, &DatasetManifest) -> Result<(f64, f64)>>,
) -> Result<Vec<SweepRow>> {
    pcts.iter()
        .map(|&pct| {
            let chosen = sample_ood(d_ood, pct, seed)?;
            let combined = combine_and_shuffle(&chosen, id_train, seed)?;
            let pnr = compute_pnr(&combined)?;
            let scores = match train_eval.as_mut() {
                Some(f) => Some(f(pct, &combined)?),
                None => None,
            };
            Ok(SweepRow {
                pct,
                n_ood: chosen.len(),
                pnr,
                miou: scores.map(|s| s.0),
                dsc: scores.map(|s| s.1),
            })
        })
        .collect()
}

pub fn write_sweep_csv(path: impl AsRef<Path>, rows: &[SweepRow]) -> Result<()> {
    let opt = |v: Option<f64>| v.map(fmt).unwrap_or_default();
    let rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| vec![format!("{:.2}", r.pct), r.n_ood.to_string(), fmt(r.pnr), opt(r.miou), opt(r.dsc)])
        .collect();
    write_rows(path.as_ref(), &["pct", "n_ood", "pnr", "miou", "dsc"], &rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: String,
    pub report: MetricsReport,
    pub delta_pnr: f64,
    pub train_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub balance: BalanceReport,
    pub unfiltered: usize,
    pub ood_kept: usize,
    pub oracle_miou: f64,
    pub methods: Vec<MethodResult>,
    pub sweep: Vec<SweepRow>,
}

impl FoldResult {
    pub fn method(&self, name: &str) -> Option<&MethodResult> {
        self.methods.iter().find(|m| m.method == name)
    }
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub folds: Vec<FoldResult>,
}

/// Regions from the configured source: ingested from disk or generated.
pub fn load_or_generate_regions(config: &PipelineConfig) -> Result<(ClassList, Vec<LabeledRegion>)> {
    match &config.regions {
        Some(dir) => load_regions(dir),
        None => {
            let synth = crate::synth::SynthConfig {
                seed: derive_seed(config.seed, "synth"),
                ..config.synth.clone()
            };
            Ok((synth.class_list()?, generate_synthetic(&synth)?))
        }
    }
}

/// Patchifies regions and assigns region-level folds.
pub fn build_dataset(classes: ClassList, regions: &[LabeledRegion], patch_size: usize, folds: usize, seed: u64) -> Result<DatasetManifest> {
    let mut patches = Vec::new();
    for r in regions {
        patches.extend(patchify(r, patch_size)?);
    }
    let mut data = DatasetManifest::from_patches(classes, patch_size, patches).map_err(Error::stage("patchify"))?;
    let assignment = split_folds(regions, folds, seed).map_err(Error::stage("split"))?;
    data.assign_region_folds(&assignment)?;
    Ok(data)
}

fn create_run_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        let mut entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        if entries.next().is_some() {
            return Err(Error::InvalidArgument(format!(
                "output directory {} is not empty; runs never overwrite earlier results",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn list_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            list_files(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).expect("walk stays under root");
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct RunIndex<'a> {
    config: &'a str,
    summary: &'a str,
    folds: Vec<usize>,
    files: Vec<String>,
}

/// Runs every stage for every selected fold under `out_dir`, which must be
/// absent or empty.
pub fn run_pipeline(config: &PipelineConfig, out_dir: impl AsRef<Path>) -> Result<RunSummary> {
    let out_dir = out_dir.as_ref();
    config.validate()?;
    create_run_dir(out_dir)?;
    let cfg_path = out_dir.join(CONFIG_FILE);
    std::fs::write(&cfg_path, config.to_toml_string()?).map_err(|e| Error::io(&cfg_path, e))?;

    let (classes, regions) = load_or_generate_regions(config).map_err(Error::stage("synth"))?;
    let data = build_dataset(classes, &regions, config.patch_size, config.folds, derive_seed(config.seed, "split"))?;
    log::info!("{} regions, {} patches", regions.len(), data.len());
    save_manifest(&data, out_dir.join("data")).map_err(Error::stage("patchify"))?;

    let mut folds = Vec::new();
    for fold in config.folds_to_run() {
        let dir = out_dir.join(format!("fold_{fold}"));
        folds.push(run_fold(config, &data, fold, &dir)?);
    }
    write_summary(&out_dir.join(SUMMARY_FILE), &folds)?;

    let mut files = Vec::new();
    list_files(out_dir, out_dir, &mut files)?;
    files.sort();
    let index = RunIndex {
        config: CONFIG_FILE,
        summary: SUMMARY_FILE,
        folds: folds.iter().map(|f| f.fold).collect(),
        files,
    };
    let index_path = out_dir.join(INDEX_FILE);
    let text = serde_json::to_string_pretty(&index).map_err(|e| Error::format(&index_path, e))?;
    std::fs::write(&index_path, text + "\n").map_err(|e| Error::io(&index_path, e))?;
    Ok(RunSummary {
        out_dir: out_dir.to_path_buf(),
        folds,
    })
}

struct FoldContext<'a> {
    config: &'a PipelineConfig,
    dir: &'a Path,
    fold: usize,
    train_seed: u64,
    test: DatasetManifest,
}

impl FoldContext<'_> {
    fn stage(&self, name: &str) -> impl FnOnce(Error) -> Error {
        Error::stage(format!("fold {}/{name}", self.fold))
    }

    fn train(&self, data: &DatasetManifest, mode: TrainMode, batchnorm: bool, method: &str) -> Result<SegmentationModel> {
        let cfg = TrainConfig {
            mode,
            batchnorm,
            seed: self.train_seed,
            ..self.config.train.clone()
        };
        log::info!("fold {}: training {method} on {} patches", self.fold, data.len());
        let (model, history): (SegmentationModel, TrainHistory) =
            train(data, &cfg).map_err(self.stage(&format!("train-{method}")))?;
        let models = self.dir.join("models");
        std::fs::create_dir_all(&models).map_err(|e| Error::io(&models, e))?;
        let path = models.join(format!("{method}.json"));
        let history = TrainHistory {
            checkpoint: Some(format!("models/{method}.json")),
            ..history
        };
        let ckpt = Checkpoint::from_model(&model, data.classes.names(), self.train_seed, Some(&cfg), Some(&history));
        save_checkpoint(&ckpt, &path)?;
        Ok(model)
    }

    fn evaluate(&self, model: &mut SegmentationModel, method: &str) -> Result<Evaluation> {
        let eval = evaluate_model(model, &self.test, self.config.ood.threshold).map_err(self.stage(&format!("eval-{method}")))?;
        let metrics = self.dir.join("metrics");
        std::fs::create_dir_all(&metrics).map_err(|e| Error::io(&metrics, e))?;
        write_metrics_csv(metrics.join(format!("{method}.csv")), &eval.patches, &eval.report, &self.test.classes)?;
        let path = metrics.join(format!("{method}.json"));
        let text = serde_json::to_string_pretty(&eval.report).map_err(|e| Error::format(&path, e))?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(eval)
    }

    fn overlays(&self, eval: &Evaluation, method: &str) -> Result<()> {
        let n = self.config.experiments.overlays;
        if n == 0 {
            return Ok(());
        }
        let dir = self.dir.join("overlays");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let by_id: std::collections::HashMap<&str, &Patch> = self.test.patches.iter().map(|p| (p.id.as_str(), p)).collect();
        for (id, pred) in eval.predictions.iter().take(n) {
            let p = by_id[id.as_str()];
            let gt = BinaryMasks::from_labelmap(&p.labelmap, p.size, p.size, self.test.classes.len())?;
            save_overlay(dir.join(format!("{id}_{method}.png")), p, pred, &gt)?;
        }
        Ok(())
    }
}

fn delta(pnr: f64, opt: f64) -> f64 {
    (pnr - opt).abs()
}

/// One fold: baseline, mining, balancing, med-ood and any extra runs.
pub fn run_fold(config: &PipelineConfig, data: &DatasetManifest, fold: usize, dir: &Path) -> Result<FoldResult> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let id_train = data.train_split(fold);
    let ctx = FoldContext {
        config,
        dir,
        fold,
        train_seed: derive_seed(config.seed, &format!("fold-{fold}/train")),
        test: data.test_split(fold),
    };
    if id_train.is_empty() || ctx.test.is_empty() {
        return Err(Error::Empty(format!("fold {fold} has an empty train or test split")));
    }
    let batchnorm = config.train.batchnorm;
    let balance_seed = derive_seed(config.seed, &format!("fold-{fold}/balance"));
    let mut methods = Vec::new();
    let mut record = |method: &str, eval: &Evaluation, delta_pnr: f64, train_size: usize| {
        methods.push(MethodResult {
            method: method.to_string(),
            report: eval.report.clone(),
            delta_pnr,
            train_size,
        })
    };

    let mut baseline = ctx.train(&id_train, TrainMode::Baseline, batchnorm, METHOD_BASELINE)?;
    let base_eval = ctx.evaluate(&mut baseline, METHOD_BASELINE)?;
    ctx.overlays(&base_eval, METHOD_BASELINE)?;

    let fallback = crate::ood::background_mean(&id_train.patches);
    let strategy = RemovalStrategy::new(config.ood.strategy, fallback);
    let unfiltered = build_unfiltered(&id_train, &strategy).map_err(ctx.stage("mine-ood"))?;
    let (d_ood, scores) = prune_ood(
        &mut ThresholdedModel {
            model: &mut baseline,
            tau: config.ood.threshold,
        },
        &unfiltered,
    )
    .map_err(ctx.stage("mine-ood"))?;
    log::info!("fold {fold}: kept {} of {} OoD candidates", d_ood.len(), unfiltered.len());
    save_manifest(&d_ood, dir.join("ood"))?;
    write_scores_csv(dir.join("ood").join("ood_scores.csv"), &scores)?;

    let balance_cfg = BalanceConfig {
        seed: balance_seed,
        ..config.balance.clone()
    };
    let report = estimate_pct_opt(&d_ood, &id_train, &balance_cfg).map_err(ctx.stage("estimate"))?;
    write_report(dir.join("balance.json"), &report)?;
    let ood_opt = sample_ood(&d_ood, report.pct_opt, balance_seed).map_err(ctx.stage("combine"))?;
    let combined = combine_and_shuffle(&ood_opt, &id_train, balance_seed).map_err(ctx.stage("combine"))?;
    save_manifest(&combined, dir.join("combined"))?;
    write_class_counts(dir.join("class_counts.csv"), &id_train, &ood_opt).map_err(ctx.stage("combine"))?;
    record(METHOD_BASELINE, &base_eval, report.baseline_delta_pnr, id_train.len());

    let mut med = ctx.train(&combined, TrainMode::MedOod, batchnorm, METHOD_MED_OOD)?;
    let med_eval = ctx.evaluate(&mut med, METHOD_MED_OOD)?;
    ctx.overlays(&med_eval, METHOD_MED_OOD)?;
    record(METHOD_MED_OOD, &med_eval, report.delta_pnr, combined.len());

    let ex = &config.experiments;
    let mut ood_only_eval = None;
    if ex.ood_only {
        if d_ood.is_empty() {
            return Err(ctx.stage("train-ood-only")(Error::Empty("every OoD candidate was pruned".into())));
        }
        let mut m = ctx.train(&d_ood, TrainMode::OodOnly, batchnorm, METHOD_OOD_ONLY)?;
        let e = ctx.evaluate(&mut m, METHOD_OOD_ONLY)?;
        record(METHOD_OOD_ONLY, &e, config.balance.pnr_opt, d_ood.len());
        ood_only_eval = Some(e);
    }
    if ex.full_ood {
        let all = combine_and_shuffle(&d_ood, &id_train, balance_seed)?;
        let d = delta(compute_pnr(&all)?, config.balance.pnr_opt);
        let mut m = ctx.train(&all, TrainMode::MedOod, batchnorm, METHOD_FULL_OOD)?;
        record(METHOD_FULL_OOD, &ctx.evaluate(&mut m, METHOD_FULL_OOD)?, d, all.len());
    }
    if ex.no_batchnorm {
        let mut m = ctx.train(&id_train, TrainMode::Baseline, false, METHOD_BASELINE_NO_BN)?;
        record(
            METHOD_BASELINE_NO_BN,
            &ctx.evaluate(&mut m, METHOD_BASELINE_NO_BN)?,
            report.baseline_delta_pnr,
            id_train.len(),
        );
        let mut m = ctx.train(&combined, TrainMode::MedOod, false, METHOD_MED_OOD_NO_BN)?;
        record(METHOD_MED_OOD_NO_BN, &ctx.evaluate(&mut m, METHOD_MED_OOD_NO_BN)?, report.delta_pnr, combined.len());
    }

    let mut columns = vec![(METHOD_BASELINE, &base_eval.report), (METHOD_MED_OOD, &med_eval.report)];
    if let Some(e) = &ood_only_eval {
        columns.push((METHOD_OOD_ONLY, &e.report));
    }
    per_class_report(dir.join("per_class.csv"), &columns, &id_train.classes)?;

    let mut sweep = Vec::new();
    if !ex.sweep.is_empty() {
        let mut step = |pct: f64, set: &DatasetManifest| -> Result<(f64, f64)> {
            let name = format!("sweep-{:.2}", pct);
            let mut m = ctx.train(set, TrainMode::MedOod, batchnorm, &name)?;
            let e = ctx.evaluate(&mut m, &name)?;
            Ok((e.report.miou, e.report.dsc))
        };
        sweep = sweep_pnr(&id_train, &d_ood, &ex.sweep, balance_seed, Some(&mut step)).map_err(ctx.stage("sweep-pnr"))?;
        write_sweep_csv(dir.join("sweep_pnr.csv"), &sweep)?;
    }

    Ok(FoldResult {
        fold,
        balance: report,
        unfiltered: unfiltered.len(),
        ood_kept: d_ood.len(),
        oracle_miou: oracle_empty_miou(&ctx.test)?,
        methods,
        sweep,
    })
}

/// One row per fold and method, then a cross-fold mean row per method.
pub fn write_summary(path: &Path, folds: &[FoldResult]) -> Result<()> {
    let mut rows = Vec::new();
    let mut order: Vec<&str> = Vec::new();
    for f in folds {
        for m in &f.methods {
            if !order.contains(&m.method.as_str()) {
                order.push(&m.method);
            }
            rows.push(vec![
                f.fold.to_string(),
                m.method.clone(),
                fmt(m.report.miou),
                fmt(m.report.dsc),
                fmt(m.delta_pnr),
                fmt(m.report.false_positive_rate),
                m.train_size.to_string(),
            ]);
        }
    }
    for method in order {
        let ms: Vec<&MethodResult> = folds.iter().filter_map(|f| f.method(method)).collect();
        let n = ms.len() as f64;
        let mean = |g: fn(&MethodResult) -> f64| fmt(ms.iter().map(|m| g(m)).sum::<f64>() / n);
        rows.push(vec![
            "mean".to_string(),
            method.to_string(),
            mean(|m| m.report.miou),
            mean(|m| m.report.dsc),
            mean(|m| m.delta_pnr),
            mean(|m| m.report.false_positive_rate),
            mean(|m| m.train_size as f64),
        ]);
    }
    write_rows(path, &["fold", "method", "miou", "dsc", "delta_pnr", "fp_rate", "train_size"], &rows)
}
