use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use medood::balance::{
    combine_and_shuffle, estimate_pct_opt, parse_grid, read_report, sample_ood, write_report, BalanceConfig,
};
use medood::dataset::{patchify, split_folds, DatasetManifest};
use medood::metrics::{write_metrics_csv, MetricsReport};
use medood::ood::{background_mean, build_unfiltered, prune_ood, write_scores_csv, RemovalKind, RemovalStrategy, ThresholdedModel};
use medood::pipeline::{
    evaluate_masks, evaluate_model, per_class_report, run_pipeline, save_overlay, sweep_pnr, write_sweep_csv, PipelineConfig,
};
use medood::segtrain::{load_checkpoint, predict_batch, save_checkpoint, threshold, train, Checkpoint, SegmentationModel, TrainMode};
use medood::store::{load_manifest, load_prediction, load_regions, save_manifest, save_predictions, save_regions};
use medood::synth::generate_synthetic;
use medood::Patch;

#[derive(Parser)]
#[command(name = "medood", version, about = "OoD patch mining and ratio-balanced segmentation training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic labelled regions.
    Synth(SynthArgs),
    /// Cut regions into fixed-size zero-padded patches.
    Patchify(PatchifyArgs),
    /// Assign region-level folds.
    Split(SplitArgs),
    /// Train a segmentation model.
    Train(TrainArgs),
    /// Build and prune OoD candidates from ID training patches.
    MineOod(MineArgs),
    /// Pick the OoD percentage that best balances the sample ratio.
    Estimate(EstimateArgs),
    /// Sample OoD patches and shuffle them into the ID set.
    Combine(CombineArgs),
    /// Score predictions or a model against a test manifest.
    Eval(EvalArgs),
    /// Write thresholded predictions for every patch.
    Predict(PredictArgs),
    /// Sample ratio (and optionally trained scores) per OoD percentage.
    SweepPnr(SweepArgs),
    /// Render input / ground truth / prediction panels.
    Overlay(OverlayArgs),
    /// Per-class IoU of several models side by side.
    Report(ReportArgs),
    /// Full pipeline into a fresh run directory.
    Run(RunArgs),
}

#[derive(Args)]
struct ConfigArg {
    /// Pipeline config file (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<PipelineConfig> {
        match &self.config {
            Some(p) => Ok(PipelineConfig::load(p)?),
            None => Ok(PipelineConfig::default()),
        }
    }
}

/// Restricts a fold-assigned manifest to one side of a split.
#[derive(Args, Default)]
struct FoldArgs {
    /// Use every patch outside this fold.
    #[arg(long, conflicts_with = "test_fold")]
    train_fold: Option<usize>,
    /// Use only the patches of this fold.
    #[arg(long)]
    test_fold: Option<usize>,
}

impl FoldArgs {
    fn apply(&self, m: DatasetManifest) -> Result<DatasetManifest> {
        if self.train_fold.is_none() && self.test_fold.is_none() {
            return Ok(m);
        }
        if m.folds.is_empty() {
            bail!("manifest has no fold assignment; run `medood split` first");
        }
        let (fold, out) = match (self.train_fold, self.test_fold) {
            (Some(f), _) => (f, m.train_split(f)),
            (_, Some(f)) => (f, m.test_split(f)),
            _ => unreachable!(),
        };
        if out.is_empty() {
            bail!("fold {fold} selects no patches");
        }
        Ok(out)
    }
}

fn load(dir: &Path, folds: &FoldArgs) -> Result<DatasetManifest> {
    let m = load_manifest(dir).with_context(|| format!("loading manifest {}", dir.display()))?;
    folds.apply(m)
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    regions: Option<usize>,
    #[arg(long)]
    cue_rate: Option<f64>,
}

#[derive(Args)]
struct PatchifyArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value_t = medood::dataset::DEFAULT_PATCH_SIZE)]
    patch_size: usize,
    #[arg(long)]
    out: PathBuf,
    /// Assign folds right away with this many folds.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long)]
    seed: u64,
    /// Write a new manifest here instead of updating in place.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    folds: FoldArgs,
    #[arg(long, default_value = "baseline")]
    mode: TrainMode,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_batchnorm: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MineArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    folds: FoldArgs,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "nearest_inpaint")]
    strategy: RemovalKind,
    #[arg(long, default_value_t = medood::segtrain::DEFAULT_THRESHOLD)]
    threshold: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long)]
    id: PathBuf,
    #[command(flatten)]
    folds: FoldArgs,
    #[arg(long)]
    ood: PathBuf,
    #[arg(long, default_value_t = medood::balance::DEFAULT_PNR_OPT)]
    pnr_opt: f64,
    #[arg(long, default_value = "0:1:0.1")]
    grid: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CombineArgs {
    #[arg(long)]
    id: PathBuf,
    #[command(flatten)]
    folds: FoldArgs,
    #[arg(long)]
    ood: PathBuf,
    /// Balance report whose `pct_opt` is used.
    #[arg(long, required_unless_present = "pct")]
    balance: Option<PathBuf>,
    #[arg(long, conflicts_with = "balance")]
    pct: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictorArgs {
    /// Prediction directory written by `medood predict`.
    #[arg(long, required_unless_present = "model", conflicts_with = "model")]
    pred: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = medood::segtrain::DEFAULT_THRESHOLD)]
    threshold: f64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    folds: FoldArgs,
    #[command(flatten)]
    predictor: PredictorArgs,
    /// Per-patch metrics CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    folds: FoldArgs,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = medood::segtrain::DEFAULT_THRESHOLD)]
    threshold: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    id: PathBuf,
    #[command(flatten)]
    folds: FoldArgs,
    #[arg(long)]
    ood: PathBuf,
    /// Percentages as start:end:step; rows run from the largest down.
    #[arg(long, default_value = "0.4:1:0.1")]
    grid: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Train on each combined set and score it on this test manifest.
    #[arg(long)]
    test: Option<PathBuf>,
    /// Fold of `--test` to evaluate on.
    #[arg(long, requires = "test")]
    eval_fold: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct OverlayArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    folds: FoldArgs,
    #[command(flatten)]
    predictor: PredictorArgs,
    /// Patch ids to render; all patches when omitted.
    #[arg(long = "patch")]
    patches: Vec<String>,
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    folds: FoldArgs,
    /// `name=checkpoint`, repeatable; columns keep the given order.
    #[arg(long = "model", required = true)]
    models: Vec<String>,
    #[arg(long, default_value_t = medood::segtrain::DEFAULT_THRESHOLD)]
    threshold: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    regions: Option<PathBuf>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    folds: Option<usize>,
    /// Run only this fold (repeatable).
    #[arg(long = "fold")]
    run_folds: Vec<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    pnr_opt: Option<f64>,
    #[arg(long)]
    grid: Option<String>,
    #[arg(long)]
    strategy: Option<RemovalKind>,
    #[arg(long)]
    synth_regions: Option<usize>,
    #[arg(long)]
    cue_rate: Option<f64>,
    #[arg(long)]
    no_batchnorm: bool,
    /// Extra runs: OoD-only training.
    #[arg(long)]
    ood_only: bool,
    /// Extra runs: with and without batch normalization.
    #[arg(long)]
    bn_ablation: bool,
    /// Extra runs: every mined OoD patch added.
    #[arg(long)]
    full_ood: bool,
    /// Extra runs: one model per percentage, e.g. 0.4:1:0.1.
    #[arg(long)]
    sweep: Option<String>,
    #[arg(long)]
    overlays: Option<usize>,
}

fn load_model(path: &Path) -> Result<SegmentationModel> {
    let ckpt = load_checkpoint(path)?;
    Ok(ckpt.build_model()?)
}

fn predictions(manifest: &DatasetManifest, args: &PredictorArgs) -> Result<Vec<(String, medood::metrics::BinaryMasks)>> {
    if let Some(model) = &args.model {
        let mut model = load_model(model)?;
        let refs: Vec<&Patch> = manifest.patches.iter().collect();
        let probs = predict_batch(&mut model, &refs)?;
        return Ok(refs.iter().zip(&probs).map(|(p, pr)| (p.id.clone(), threshold(pr, args.threshold))).collect());
    }
    let dir = args.pred.as_ref().expect("clap requires --pred or --model");
    manifest
        .patches
        .iter()
        .map(|p| Ok((p.id.clone(), load_prediction(dir, &p.id, manifest.classes.len())?)))
        .collect()
}

fn print_report(r: &MetricsReport) {
    println!("patches {}", r.patch_count);
    println!("miou {:.6}", r.miou);
    println!("dsc {:.6}", r.dsc);
    println!("fp_rate {:.6}", r.false_positive_rate);
    for (name, v) in &r.per_class_iou {
        println!("iou[{name}] {v:.6}");
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Synth(a) => {
            let mut cfg = a.config.load()?.synth;
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            if let Some(n) = a.regions {
                cfg.regions = n;
            }
            if let Some(r) = a.cue_rate {
                cfg.cue_rate = r;
            }
            let regions = generate_synthetic(&cfg)?;
            save_regions(&regions, &cfg.class_list()?, &a.out)?;
            println!("wrote {} regions to {}", regions.len(), a.out.display());
        }
        Command::Patchify(a) => {
            let (classes, regions) = load_regions(&a.input)?;
            let mut patches = Vec::new();
            for r in &regions {
                patches.extend(patchify(r, a.patch_size)?);
            }
            let mut m = DatasetManifest::from_patches(classes, a.patch_size, patches)?;
            if let Some(k) = a.k {
                m.assign_region_folds(&split_folds(&regions, k, a.seed)?)?;
            }
            save_manifest(&m, &a.out)?;
            println!("wrote {} patches to {}", m.len(), a.out.display());
        }
        Command::Split(a) => {
            let mut m = load_manifest(&a.manifest)?;
            let mut ids: Vec<&str> = m.patches.iter().map(|p| p.region_id.as_str()).collect();
            ids.sort_unstable();
            ids.dedup();
            let assignment = medood::dataset::split_region_ids(&ids, a.k, a.seed)?;
            m.folds.clear();
            m.assign_region_folds(&assignment)?;
            save_manifest(&m, a.out.as_ref().unwrap_or(&a.manifest))?;
            for f in 0..a.k {
                println!("fold {f}: {} patches", m.test_split(f).len());
            }
        }
        Command::Train(a) => {
            let data = load(&a.manifest, &a.folds)?;
            let mut cfg = a.config.load()?.train;
            cfg.mode = a.mode;
            if let Some(v) = a.lambda {
                cfg.lambda = v;
            }
            if let Some(v) = a.epochs {
                cfg.epochs = v;
            }
            if let Some(v) = a.batch_size {
                cfg.batch_size = v;
            }
            if let Some(v) = a.learning_rate {
                cfg.learning_rate = v;
            }
            if let Some(v) = a.seed {
                cfg.seed = v;
            }
            if a.no_batchnorm {
                cfg.batchnorm = false;
            }
            let (model, mut history) = train(&data, &cfg)?;
            history.checkpoint = Some(a.out.display().to_string());
            let ckpt = Checkpoint::from_model(&model, data.classes.names(), cfg.seed, Some(&cfg), Some(&history));
            save_checkpoint(&ckpt, &a.out)?;
            for (e, l) in history.epoch_losses.iter().enumerate() {
                println!("epoch {e} loss {l:.6}");
            }
        }
        Command::MineOod(a) => {
            let id_train = load(&a.manifest, &a.folds)?;
            let mut model = load_model(&a.model)?;
            let strategy = RemovalStrategy::new(a.strategy, background_mean(&id_train.patches));
            let unfiltered = build_unfiltered(&id_train, &strategy)?;
            let (d_ood, scores) = prune_ood(
                &mut ThresholdedModel {
                    model: &mut model,
                    tau: a.threshold,
                },
                &unfiltered,
            )?;
            save_manifest(&d_ood, &a.out)?;
            write_scores_csv(a.out.join("ood_scores.csv"), &scores)?;
            println!("kept {} of {} candidates", d_ood.len(), unfiltered.len());
        }
        Command::Estimate(a) => {
            let id = load(&a.id, &a.folds)?;
            let ood = load_manifest(&a.ood)?;
            let cfg = BalanceConfig {
                pnr_opt: a.pnr_opt,
                grid: parse_grid(&a.grid)?,
                seed: 0,
            };
            let r = estimate_pct_opt(&ood, &id, &cfg)?;
            write_report(&a.out, &r)?;
            println!("pos {} neg {} pnr {:.6}", r.pos_count, r.neg_count, r.baseline_pnr);
            println!("pct_opt {} n_ood {} pnr {:.6} delta_pnr {:.6}", r.pct_opt, r.ood_selected, r.pnr, r.delta_pnr);
        }
        Command::Combine(a) => {
            let id = load(&a.id, &a.folds)?;
            let ood = load_manifest(&a.ood)?;
            let pct = match (&a.balance, a.pct) {
                (Some(path), _) => read_report(path)?.pct_opt,
                (None, Some(p)) => p,
                _ => unreachable!("clap requires one of --balance/--pct"),
            };
            let chosen = sample_ood(&ood, pct, a.seed)?;
            let combined = combine_and_shuffle(&chosen, &id, a.seed)?;
            save_manifest(&combined, &a.out)?;
            println!("{} ID + {} OoD = {} patches", id.len(), chosen.len(), combined.len());
        }
        Command::Eval(a) => {
            let test = load(&a.manifest, &a.folds)?;
            let eval = evaluate_masks(&test, predictions(&test, &a.predictor)?)?;
            if let Some(out) = &a.out {
                write_metrics_csv(out, &eval.patches, &eval.report, &test.classes)?;
            }
            print_report(&eval.report);
        }
        Command::Predict(a) => {
            let data = load(&a.manifest, &a.folds)?;
            let preds = predictions(
                &data,
                &PredictorArgs {
                    pred: None,
                    model: Some(a.model.clone()),
                    threshold: a.threshold,
                },
            )?;
            save_predictions(&a.out, &preds)?;
            println!("wrote {} predictions to {}", preds.len(), a.out.display());
        }
        Command::SweepPnr(a) => {
            let id = load(&a.id, &a.folds)?;
            let ood = load_manifest(&a.ood)?;
            let mut pcts = parse_grid(&a.grid)?;
            pcts.reverse();
            let rows = match &a.test {
                None => sweep_pnr(&id, &ood, &pcts, a.seed, None)?,
                Some(test_dir) => {
                    let test = load(
                        test_dir,
                        &FoldArgs {
                            train_fold: None,
                            test_fold: a.eval_fold,
                        },
                    )?;
                    let mut cfg = a.config.load()?.train;
                    cfg.mode = TrainMode::MedOod;
                    cfg.seed = a.seed;
                    if let Some(e) = a.epochs {
                        cfg.epochs = e;
                    }
                    let mut step = |_pct: f64, set: &DatasetManifest| -> medood::Result<(f64, f64)> {
                        let (mut model, _) = train(set, &cfg)?;
                        let e = evaluate_model(&mut model, &test, cfg.threshold)?;
                        Ok((e.report.miou, e.report.dsc))
                    };
                    sweep_pnr(&id, &ood, &pcts, a.seed, Some(&mut step))?
                }
            };
            write_sweep_csv(&a.out, &rows)?;
            for r in &rows {
                println!("pct {:.2} n_ood {} pnr {:.6}", r.pct, r.n_ood, r.pnr);
            }
        }
        Command::Overlay(a) => {
            let mut data = load(&a.manifest, &a.folds)?;
            if !a.patches.is_empty() {
                let want: std::collections::HashSet<&str> = a.patches.iter().map(String::as_str).collect();
                data = data.filter(|p| want.contains(p.id.as_str()));
                if data.len() != want.len() {
                    bail!("some requested patch ids are not in the manifest");
                }
            }
            if let Some(n) = a.limit {
                data.patches.truncate(n);
            }
            std::fs::create_dir_all(&a.out)?;
            let preds = predictions(&data, &a.predictor)?;
            for (p, (_, pred)) in data.patches.iter().zip(&preds) {
                let gt = medood::metrics::BinaryMasks::from_labelmap(&p.labelmap, p.size, p.size, data.classes.len())?;
                save_overlay(a.out.join(format!("{}.png", p.id)), p, pred, &gt)?;
            }
            println!("wrote {} overlays to {}", preds.len(), a.out.display());
        }
        Command::Report(a) => {
            let test = load(&a.manifest, &a.folds)?;
            let mut reports: Vec<(String, MetricsReport)> = Vec::new();
            for spec in &a.models {
                let (name, path) = spec.split_once('=').context("--model expects name=checkpoint")?;
                let mut model = load_model(Path::new(path)).with_context(|| format!("loading checkpoint for {name}"))?;
                reports.push((name.to_string(), evaluate_model(&mut model, &test, a.threshold)?.report));
            }
            let columns: Vec<(&str, &MetricsReport)> = reports.iter().map(|(n, r)| (n.as_str(), r)).collect();
            per_class_report(&a.out, &columns, &test.classes)?;
            for (n, r) in &reports {
                println!("{n} miou {:.6}", r.miou);
            }
        }
        Command::Run(a) => {
            let mut cfg = a.config.load()?;
            cfg.seed = a.seed;
            if a.regions.is_some() {
                cfg.regions = a.regions.clone();
            }
            if let Some(v) = a.patch_size {
                cfg.patch_size = v;
            }
            if let Some(v) = a.folds {
                cfg.folds = v;
            }
            if !a.run_folds.is_empty() {
                cfg.run_folds = a.run_folds.clone();
            }
            if let Some(v) = a.epochs {
                cfg.train.epochs = v;
            }
            if let Some(v) = a.batch_size {
                cfg.train.batch_size = v;
            }
            if let Some(v) = a.lambda {
                cfg.train.lambda = v;
            }
            if let Some(v) = a.pnr_opt {
                cfg.balance.pnr_opt = v;
            }
            if let Some(g) = &a.grid {
                cfg.balance.grid = parse_grid(g)?;
            }
            if let Some(s) = a.strategy {
                cfg.ood.strategy = s;
            }
            if let Some(v) = a.synth_regions {
                cfg.synth.regions = v;
            }
            if let Some(v) = a.cue_rate {
                cfg.synth.cue_rate = v;
            }
            if a.no_batchnorm {
                cfg.train.batchnorm = false;
            }
            cfg.experiments.ood_only |= a.ood_only;
            cfg.experiments.no_batchnorm |= a.bn_ablation;
            cfg.experiments.full_ood |= a.full_ood;
            if let Some(g) = &a.sweep {
                let mut p = parse_grid(g)?;
                p.reverse();
                cfg.experiments.sweep = p;
            }
            if let Some(n) = a.overlays {
                cfg.experiments.overlays = n;
            }
            let summary = run_pipeline(&cfg, &a.out)?;
            let mut means: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
            for f in &summary.folds {
                for m in &f.methods {
                    println!(
                        "fold {} {:<16} miou {:.4} dsc {:.4} delta_pnr {:.4}",
                        f.fold, m.method, m.report.miou, m.report.dsc, m.delta_pnr
                    );
                    means.entry(&m.method).or_default().push(m.report.miou);
                }
            }
            for (m, v) in means {
                println!("mean {m:<16} miou {:.4}", v.iter().sum::<f64>() / v.len() as f64);
            }
            println!("run written to {}", summary.out_dir.display());
        }
    }
    Ok(())
}
