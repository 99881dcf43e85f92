use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &[&str] = &[
    "--epochs", "6", "--warmup", "2", "--d-model", "8", "--d-ff", "16", "--n-blocks", "1",
    "--batch-size", "16",
];

fn cetx(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cetx"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("cetx runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = cetx(dir, args);
    assert!(
        out.status.success(),
        "cetx {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn synth(dir: &Path) {
    ok(dir, &["synth", "--n", "200", "--d", "4", "--bias", "1", "--seed", "5", "--out", "d.csv"]);
}

fn train(dir: &Path, out: &str, extra: &[&str]) {
    let mut args = vec!["train", "--data", "d.csv", "--out", out];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    ok(dir, &args);
}

#[test]
fn synth_writes_the_schema_and_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let args = [
        "synth", "--n", "1000", "--d", "10", "--bias", "3", "--effect", "nonlinear", "--seed", "7",
    ];
    ok(tmp.path(), &[&args[..], &["--out", "a.csv"]].concat());
    ok(tmp.path(), &[&args[..], &["--out", "b.csv"]].concat());
    let a = fs::read_to_string(tmp.path().join("a.csv")).unwrap();
    assert_eq!(a, fs::read_to_string(tmp.path().join("b.csv")).unwrap());
    let lines: Vec<&str> = a.lines().collect();
    assert_eq!(lines.len(), 1001);
    assert!(lines.iter().all(|l| l.split(',').count() == 15));
    assert!(lines[0].starts_with("t,yf,ycf,mu0,mu1,x0,"));
    assert!(tmp.path().join("a.manifest.json").exists());
}

#[test]
fn synth_rejects_tiny_n_with_data_exit_code() {
    let tmp = TempDir::new().unwrap();
    let out = cetx(tmp.path(), &["synth", "--n", "2", "--out", "d.csv"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn train_writes_run_directory_and_repeats_exactly() {
    let tmp = TempDir::new().unwrap();
    synth(tmp.path());
    train(tmp.path(), "r1", &["--seed", "1"]);
    train(tmp.path(), "r2", &["--seed", "1"]);
    for f in ["checkpoint.txt", "trace.csv", "report.json", "manifest.json", "splits.json"] {
        assert!(tmp.path().join("r1").join(f).exists(), "{f}");
    }
    let t1 = fs::read(tmp.path().join("r1/trace.csv")).unwrap();
    assert_eq!(t1, fs::read(tmp.path().join("r2/trace.csv")).unwrap());
    assert_eq!(
        String::from_utf8(t1).unwrap().lines().next().unwrap(),
        "epoch,l_reco,l_p,wass,group_kl,val_mse"
    );
}

#[test]
fn no_discriminator_matches_zero_beta() {
    let tmp = TempDir::new().unwrap();
    synth(tmp.path());
    train(tmp.path(), "abl", &["--seed", "2", "--ablation", "no_discriminator"]);
    train(tmp.path(), "b0", &["--seed", "2", "--beta", "0"]);
    assert_eq!(
        fs::read(tmp.path().join("abl/trace.csv")).unwrap(),
        fs::read(tmp.path().join("b0/trace.csv")).unwrap()
    );
}

#[test]
fn eval_reports_oracle_baselines_and_seed_spread() {
    let tmp = TempDir::new().unwrap();
    synth(tmp.path());
    train(tmp.path(), "run", &["--seeds", "1..2", "--jobs", "2"]);
    let table = ok(tmp.path(), &["eval", "--run", "run", "--with-baselines", "--oracle"]);
    assert!(table.contains("±"));
    for method in ["full", "ols_lr1", "ols_lr2", "knn", "oracle"] {
        for split in ["in", "out"] {
            assert!(
                table.contains(&format!("| {method} | {split} |")),
                "{method}/{split} missing in\n{table}"
            );
        }
    }
    let report: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(tmp.path().join("run/eval/seed-1/report.json")).unwrap(),
    )
    .unwrap();
    let oracle: Vec<&serde_json::Value> = report
        .as_array()
        .unwrap()
        .iter()
        .filter(|r| r["method"] == "oracle")
        .collect();
    assert_eq!(oracle.len(), 2);
    assert!(oracle.iter().all(|r| r["sqrt_pehe"] == 0.0));
    assert!(tmp.path().join("run/eval/seed-1/predictions.csv").exists());
    assert!(tmp.path().join("run/eval/seed-1/embeddings.csv").exists());
}

#[test]
fn report_compares_runs_and_traces() {
    let tmp = TempDir::new().unwrap();
    synth(tmp.path());
    train(tmp.path(), "a", &["--seed", "3"]);
    ok(
        tmp.path(),
        &[
            "train", "--data", "d.csv", "--out", "b", "--seed", "3", "--epochs", "40", "--warmup", "2",
            "--patience", "1", "--lr", "0.01", "--d-model", "8", "--d-ff", "16", "--n-blocks", "1",
        ],
    );
    let md = ok(tmp.path(), &["report", "--runs", "a", "b", "--out", "rep"]);
    assert!(md.lines().next().unwrap().starts_with("| metric | split | a | b |"));
    let kl = fs::read_to_string(tmp.path().join("rep/kl_trace.csv")).unwrap();
    assert_eq!(kl.lines().next().unwrap(), "epoch,a,b");
    let b_epochs = fs::read_to_string(tmp.path().join("b/trace.csv")).unwrap().lines().count() - 1;
    assert!(b_epochs < 40, "early stop expected, got {b_epochs} epochs");

    let out = cetx(tmp.path(), &["report", "--runs", "missing", "--out", "rep2"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn replay_reproduces_and_detects_changed_inputs() {
    let tmp = TempDir::new().unwrap();
    synth(tmp.path());
    train(tmp.path(), "orig", &["--seed", "4"]);
    ok(tmp.path(), &["replay", "--manifest", "orig/manifest.json", "--out", "again"]);
    assert_eq!(
        fs::read(tmp.path().join("orig/trace.csv")).unwrap(),
        fs::read(tmp.path().join("again/trace.csv")).unwrap()
    );
    assert_eq!(
        fs::read(tmp.path().join("orig/checkpoint.txt")).unwrap(),
        fs::read(tmp.path().join("again/checkpoint.txt")).unwrap()
    );
    fs::write(tmp.path().join("d.csv"), "t,yf,x0\n1,0,0\n0,1,1\n").unwrap();
    let out = cetx(tmp.path(), &["replay", "--manifest", "orig/manifest.json", "--out", "x"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn config_file_and_exit_codes() {
    let tmp = TempDir::new().unwrap();
    synth(tmp.path());
    fs::write(
        tmp.path().join("cfg.toml"),
        "beta = 0.5\nepochs = 3\nwarmup_epochs = 1\n[encoder]\nd_model = 8\nd_ff = 8\nn_blocks = 1\n",
    )
    .unwrap();
    ok(tmp.path(), &["train", "--data", "d.csv", "--config", "cfg.toml", "--gamma", "2", "--out", "c"]);
    let cfg = fs::read_to_string(tmp.path().join("c/config.toml")).unwrap();
    assert!(cfg.contains("beta = 0.5"));
    assert!(cfg.contains("gamma = 2.0"));
    assert!(cfg.contains("epochs = 3"));

    fs::write(tmp.path().join("bad.toml"), "betta = 1\n").unwrap();
    let out = cetx(tmp.path(), &["train", "--data", "d.csv", "--config", "bad.toml", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
    let out = cetx(tmp.path(), &["train", "--data", "d.csv", "--n-heads", "3", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
    let out = cetx(tmp.path(), &["train", "--data", "nothing.csv", "--out", "x"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn ablate_trains_three_variants_on_shared_splits() {
    let tmp = TempDir::new().unwrap();
    synth(tmp.path());
    let mut args = vec!["ablate", "--data", "d.csv", "--seed", "1", "--out", "abl"];
    args.extend_from_slice(TINY);
    let table = ok(tmp.path(), &args);
    for a in ["full", "no_transformer", "no_discriminator"] {
        assert!(table.contains(&format!("| {a} | {a} | out |")), "{table}");
    }
    let splits = |a: &str| fs::read(tmp.path().join(format!("abl/{a}/splits.json"))).unwrap();
    assert_eq!(splits("full"), splits("no_transformer"));
    assert_eq!(splits("full"), splits("no_discriminator"));
    assert!(tmp.path().join("abl/ablation.md").exists());
}
