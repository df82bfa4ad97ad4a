mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use divid::eval::{LeakageReportFile, SwapReportFile};
use divid::grid::MARGIN;

fn divid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_divid")).args(args).env_remove("DIVID_SEED").output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(code(&divid(&[])), 2);
    assert_eq!(code(&divid(&["train", "--bogus"])), 2);
    assert_eq!(code(&divid(&["no-such-command"])), 2);
    assert_eq!(code(&divid(&["--help"])), 0);
    assert_eq!(code(&divid(&["eval-swap", "--help"])), 0);
}

#[test]
fn runtime_failures_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = divid(&["train", "--out", p(dir.path())]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("no dataset"));
    let missing = dir.path().join("missing.ckpt");
    assert_eq!(code(&divid(&["eval-swap", "--ckpt", p(&missing), "--data", p(dir.path()), "--out", p(dir.path())])), 1);
    assert_eq!(code(&divid(&["generate-data", "--out", p(dir.path()), "--num-clips", "0"])), 1);
    let bad_seed = Command::new(env!("CARGO_BIN_EXE_divid"))
        .args(["generate-data", "--out", p(dir.path()), "--num-clips", "2"])
        .env("DIVID_SEED", "not-a-number")
        .output()
        .unwrap();
    assert_eq!(code(&bad_seed), 1);
}

#[test]
fn generate_data_is_byte_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let args = |d: &Path| -> Vec<String> {
        ["generate-data", "--out", p(d), "--num-clips", "6", "--frames", "3", "--resolution", "16", "16", "--seed", "4"]
            .iter()
            .map(|s| s.to_string())
            .collect()
    };
    for d in [a.path(), b.path()] {
        let out = Command::new(env!("CARGO_BIN_EXE_divid")).args(args(d)).output().unwrap();
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    let (fa, fb) = (files_under(a.path()), files_under(b.path()));
    assert_eq!(fa, fb);
    assert!(fa.iter().any(|f| f.ends_with("train/manifest.json")));
    assert!(fa.iter().any(|f| f.ends_with("frame_002.png")));
    for f in &fa {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{}", f.display());
    }
}

#[test]
fn seed_falls_back_to_the_environment() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let run = |d: &Path, env: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_divid"));
        c.args(["generate-data", "--out", p(d), "--num-clips", "2", "--frames", "2", "--resolution", "16", "16"]);
        match env {
            Some(v) => c.env("DIVID_SEED", v),
            None => c.env_remove("DIVID_SEED"),
        };
        assert_eq!(code(&c.output().unwrap()), 0);
    };
    run(a.path(), Some("9"));
    let flagged = tempfile::tempdir().unwrap();
    let out = divid(&["generate-data", "--out", p(flagged.path()), "--num-clips", "2", "--frames", "2", "--resolution", "16", "16", "--seed", "9"]);
    assert_eq!(code(&out), 0);
    run(b.path(), None);
    let m = |d: &Path| fs::read(d.join("train/manifest.json")).unwrap();
    assert_eq!(m(a.path()), m(flagged.path()));
    assert_ne!(m(a.path()), m(b.path()));
}

#[test]
fn full_pipeline_from_data_to_reports() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    let run = root.path().join("run");
    let out = divid(&["generate-data", "--out", p(&data), "--num-clips", "36", "--frames", "4", "--resolution", "16", "16"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let cfg = root.path().join("tiny.toml");
    fs::write(&cfg, common::TINY_TOML).unwrap();
    let out = divid(&["train", "--config", p(&cfg), "--out", p(&run), "--data", p(&data), "--set", "train.steps=6"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = run.join("last.ckpt");
    assert!(ckpt.exists());

    let test_dir = data.join("test");
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(test_dir.join("manifest.json")).unwrap()).unwrap();
    let clip = |i: usize| test_dir.join(manifest["clips"][i]["path"].as_str().unwrap());

    let grid_h = |rows: u32| rows * 16 + (rows + 1) * MARGIN;
    let grid_w = 4 * 16 + 5 * MARGIN;

    let sample = run.join("sample.png");
    let out = divid(&["sample", "--ckpt", p(&ckpt), "--src", p(&clip(0)), "--out", p(&sample)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let img = image::open(&sample).unwrap();
    assert_eq!((img.width(), img.height()), (grid_w, grid_h(2)));

    let swap = run.join("grids/swap.png");
    let out = divid(&["swap", "--ckpt", p(&ckpt), "--src", p(&clip(0)), "--tgt", p(&clip(7)), "--out", p(&swap), "--seed", "3"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let img = image::open(&swap).unwrap();
    assert_eq!((img.width(), img.height()), (grid_w, grid_h(3)));
    assert!(run.join("grids/swap.resolved.json").exists());

    let eval = run.join("eval");
    let out = divid(&["eval-swap", "--ckpt", p(&ckpt), "--data", p(&data), "--out", p(&eval), "--max-pairs", "2"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: SwapReportFile = serde_json::from_str(&fs::read_to_string(eval.join("swap_report.json")).unwrap()).unwrap();
    assert_eq!(report.num_pairs, 2);
    assert_eq!(report.records.len(), 4);
    assert!(report.joint_acc <= report.static_only_acc.min(report.dynamic_only_acc));
    assert_eq!(report.meta.checkpoint_step, 6);
    assert!(eval.join("judge.ckpt").exists());

    // a second evaluation reuses the saved judge and reproduces the report
    let out = divid(&["eval-swap", "--ckpt", p(&ckpt), "--data", p(&data), "--out", p(&eval), "--max-pairs", "2"]);
    assert_eq!(code(&out), 0);
    let again: SwapReportFile = serde_json::from_str(&fs::read_to_string(eval.join("swap_report.json")).unwrap()).unwrap();
    assert_eq!(again, report);

    let out = divid(&["eval-leakage", "--ckpt", p(&ckpt), "--data", p(&data), "--out", p(&eval)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let leak: LeakageReportFile = serde_json::from_str(&fs::read_to_string(eval.join("leakage_report.json")).unwrap()).unwrap();
    assert_eq!(leak.trained.average_leakage, (leak.trained.acc_s_to_d + leak.trained.acc_d_to_s) / 2.0);
    assert_eq!(leak.leakage_reduction, leak.random_init.average_leakage - leak.trained.average_leakage);

    let plot = run.join("plot.png");
    let out = divid(&["plot-grid", "--ckpt", p(&ckpt), "--data", p(&data), "--out", p(&plot), "--pairs", "2"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let img = image::open(&plot).unwrap();
    assert_eq!((img.width(), img.height()), (grid_w, grid_h(6)));

    let resumed = root.path().join("resumed");
    let out = divid(&[
        "train", "--config", p(&cfg), "--out", p(&resumed), "--data", p(&data), "--set", "train.steps=8", "--resume", p(&ckpt),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let out = divid(&[
        "train", "--config", p(&cfg), "--out", p(&resumed), "--data", p(&data), "--set", "encoder.token_dim=32", "--resume", p(&ckpt),
    ]);
    assert_eq!(code(&out), 1);
}
