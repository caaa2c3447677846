use std::path::{Path, PathBuf};
use std::process::Command;

const TINY: &str = r#"
patch_size = 16
run_folds = [0]

[synth]
regions = 6
min_size = 40
max_size = 48

[train]
epochs = 2
batch_size = 8

[experiments]
ood_only = true
sweep = [0.5]
overlays = 1
"#;

fn medood(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_medood")).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "medood {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn medood_fails(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_medood")).args(args).output().unwrap();
    assert!(!out.status.success(), "medood {args:?} unexpectedly succeeded");
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

#[test]
fn run_is_reproducible_and_complete() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    medood(&["run", "--config", s(&cfg), "--seed", "3", "--out", s(&a)]);
    medood(&["run", "--config", s(&cfg), "--seed", "3", "--out", s(&b)]);
    let listed = files(&a);
    assert_eq!(listed, files(&b));
    for rel in &listed {
        assert_eq!(std::fs::read(a.join(rel)).unwrap(), std::fs::read(b.join(rel)).unwrap(), "{}", rel.display());
    }
    for expected in [
        "summary.csv",
        "index.json",
        "config.toml",
        "fold_0/balance.json",
        "fold_0/sweep_pnr.csv",
        "fold_0/per_class.csv",
        "fold_0/class_counts.csv",
        "fold_0/ood/ood_scores.csv",
        "fold_0/models/baseline.json",
        "fold_0/models/med-ood.json",
        "fold_0/models/ood-only.json",
        "fold_0/metrics/baseline.csv",
        "fold_0/metrics/med-ood.csv",
    ] {
        assert!(listed.contains(&PathBuf::from(expected)), "missing {expected}");
    }
    assert!(listed.iter().any(|p| p.starts_with("fold_0/overlays")));
    let summary = std::fs::read_to_string(a.join("summary.csv")).unwrap();
    assert!(summary.starts_with("fold,method,miou,dsc,delta_pnr,fp_rate,train_size"));
    assert!(summary.lines().any(|l| l.starts_with("0,med-ood,")));

    // Refuses to overwrite a finished run.
    medood_fails(&["run", "--config", s(&cfg), "--seed", "3", "--out", s(&a)]);
}

#[test]
fn stepwise_commands_chain() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);
    let cfg = p("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();

    medood(&["synth", "--config", s(&cfg), "--seed", "5", "--out", s(&p("regions"))]);
    medood(&["patchify", "--in", s(&p("regions")), "--patch-size", "16", "--out", s(&p("patches"))]);
    medood(&["split", "--manifest", s(&p("patches")), "--k", "3", "--seed", "5"]);
    let tr = ["--train-fold", "0"];
    let te = ["--test-fold", "0"];
    let m = s(&p("patches")).to_string();
    let model = p("baseline.json");
    medood(&[&["train", "--config", s(&cfg), "--manifest", &m][..], &tr, &["--seed", "1", "--out", s(&model)]].concat());
    medood(&[&["mine-ood", "--manifest", &m][..], &tr, &["--model", s(&model), "--out", s(&p("ood"))]].concat());
    assert!(p("ood/ood_scores.csv").exists());
    medood(&[&["estimate", "--id", &m][..], &tr, &["--ood", s(&p("ood")), "--out", s(&p("balance.json"))]].concat());
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p("balance.json")).unwrap()).unwrap();
    assert!(report["pct_opt"].as_f64().unwrap() >= 0.0);
    medood(
        &[
            &["combine", "--id", &m][..],
            &tr,
            &["--ood", s(&p("ood")), "--balance", s(&p("balance.json")), "--out", s(&p("combined"))],
        ]
        .concat(),
    );
    medood(
        &[
            &["train", "--config", s(&cfg), "--manifest", s(&p("combined")), "--mode", "med-ood", "--seed", "1"][..],
            &["--out", s(&p("med.json"))],
        ]
        .concat(),
    );
    let csv = p("eval.csv");
    medood(&[&["eval", "--manifest", &m][..], &te, &["--model", s(&p("med.json")), "--out", s(&csv)]].concat());
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.lines().last().unwrap().starts_with("mean,"));
    medood(&[&["sweep-pnr", "--id", &m][..], &tr, &["--ood", s(&p("ood")), "--out", s(&p("sweep.csv"))]].concat());
    let sweep = std::fs::read_to_string(p("sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 1 + 7);
    assert!(sweep.lines().nth(1).unwrap().starts_with("1.00,"));
    medood(
        &[
            &["sweep-pnr", "--id", &m][..],
            &tr,
            &["--ood", s(&p("ood")), "--grid", "0.5:1:0.5", "--test", &m, "--eval-fold", "0", "--epochs", "1"],
            &["--out", s(&p("sweep_eval.csv"))],
        ]
        .concat(),
    );
    let rows: Vec<String> = std::fs::read_to_string(p("sweep_eval.csv")).unwrap().lines().map(String::from).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[1..].iter().all(|r| !r.ends_with(",,")));
}

#[test]
fn bad_arguments_are_reported() {
    let err = medood_fails(&["run", "--out", "/nonexistent/x"]);
    assert!(err.contains("--seed"));
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "patch_size = 30\n").unwrap();
    let err = medood_fails(&["run", "--config", s(&cfg), "--seed", "1", "--out", s(&dir.path().join("o"))]);
    assert!(err.to_lowercase().contains("patch"), "{err}");
    let err = medood_fails(&["estimate", "--id", "/nonexistent", "--ood", "/nonexistent", "--out", "x.json"]);
    assert!(!err.is_empty());
}
