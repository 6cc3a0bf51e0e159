use std::path::Path;
use std::process::{Command, Output};

fn hban(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hban"))
        .args(args)
        .output()
        .expect("spawn hban")
}

fn ok(args: &[&str]) -> String {
    let out = hban(args);
    assert!(
        out.status.success(),
        "hban {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn pipeline_from_dataset_to_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.bfch");
    let model = dir.path().join("m.bfnn");
    let curve = dir.path().join("curve.csv");
    let side = dir.path().join("labels.csv");
    ok(&[
        "gen-data",
        "--preset",
        "desk-miso",
        "--samples",
        "400",
        "--seed",
        "2",
        "--out",
        p(&data),
    ]);
    ok(&["labels", "--data", p(&data), "--groups", "2", "--out", p(&side)]);
    let sidecar = std::fs::read_to_string(&side).unwrap();
    assert!(sidecar.starts_with("sample_id,group,i_star,j_star\n"));
    assert_eq!(sidecar.lines().count(), 401);

    let cfg = dir.path().join("train.toml");
    std::fs::write(&cfg, "epochs = 2\n").unwrap();
    let out = ok(&[
        "train",
        "--data",
        p(&data),
        "--groups",
        "2",
        "--n1",
        "2",
        "--n2",
        "3",
        "--epochs",
        "9",
        "--config",
        p(&cfg),
        "--out",
        p(&model),
        "--curve",
        p(&curve),
    ]);
    assert!(out.contains("coarse:") && out.contains("fine:"));
    let curve = std::fs::read_to_string(&curve).unwrap();
    // the config file wins over --epochs
    assert!(curve.lines().count() <= 1 + 2 + 2, "{curve}");

    let plain = ok(&["eval", "--data", p(&data), "--groups", "2", "--model", p(&model)]);
    assert!(plain.contains("measurements 5"), "{plain}");
    let pcs = ok(&[
        "eval",
        "--data",
        p(&data),
        "--groups",
        "2",
        "--model",
        p(&model),
        "--pcs",
    ]);
    assert!(pcs.starts_with("accuracy "));
    let wrong = hban(&["eval", "--data", p(&data), "--groups", "3", "--model", p(&model)]);
    assert!(!wrong.status.success());
}

#[test]
fn sweeps_write_reports_and_flag_failures() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = dir.path().join("exp.toml");
    std::fs::write(
        &cfg,
        "groups = { fixed = 2 }\n[dataset]\nsource = \"synthetic\"\nsamples = 300\nseed = 4\n[train]\nepochs = 1\n",
    )
    .unwrap();
    let common = [
        "--config",
        p(&cfg),
        "--methods",
        "hban,exhaustive,two-tier:4,amcf",
        "--budgets",
        "1+2",
        "--seeds",
        "0",
    ];
    let mut args = vec!["budget-sweep"];
    args.extend(common);
    args.extend(["--out", p(&out)]);
    ok(&args);
    for f in [
        "cells.csv",
        "accuracy_vs_budget.csv",
        "se_vs_budget.csv",
        "summary.toml",
        "config.toml",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
    let cells = std::fs::read_to_string(out.join("cells.csv")).unwrap();
    assert!(cells.starts_with("# hban-report v1\n"));
    assert_eq!(cells.lines().count(), 2 + 4);

    let again = dir.path().join("again");
    ok(&["report", "--dir", p(&out), "--out", p(&again)]);
    assert_eq!(std::fs::read_to_string(again.join("cells.csv")).unwrap(), cells);

    let mut noise = vec!["noise-sweep"];
    noise.extend(common);
    let n_out = dir.path().join("noise");
    noise.extend(["--noise-psd", "off,-161", "--noise-budget", "1+2", "--out", p(&n_out)]);
    ok(&noise);
    let acc = std::fs::read_to_string(n_out.join("accuracy_vs_noise.csv")).unwrap();
    assert!(acc.contains("exhaustive"));

    std::fs::write(&cfg, "preset = \"desk-mimo\"\ngroups = { fixed = 2 }\n[dataset]\nsource = \"synthetic\"\nsamples = 300\nseed = 4\n[train]\nepochs = 1\n").unwrap();
    let fail = hban(&[
        "budget-sweep",
        "--config",
        p(&cfg),
        "--methods",
        "amcf",
        "--budgets",
        "1+2",
        "--out",
        p(&dir.path().join("f")),
    ]);
    assert!(!fail.status.success());
}

#[test]
fn missing_dataset_fails_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let out = hban(&["budget-sweep", "--data", "/nonexistent/x.bfch", "--out", p(dir.path())]);
    assert!(!out.status.success());
    assert!(!dir.path().join("checkpoints").exists());
}
