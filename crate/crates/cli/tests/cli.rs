use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

const TINY_NET: &[&str] = &[
    "image_size=16",
    "num_parts=3",
    "dim_alpha=8",
    "dim_pi=8",
    "width_multiplier=0.125",
    "adversary_width=16",
    "batch_size=2",
    "entropy_ramp=1,3",
    "checkpoint_every=3",
    "val_every=3",
];

fn partseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_partseg")).args(args).env_remove("PARTSEG_SEED").output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen_tiny(dir: &Path) {
    let out = partseg(&[
        "gen-data", "--out", p(dir), "--seed", "3", "--set", "image_size=16", "--set", "train_instances=6",
        "--set", "val_instances=3", "--set", "test_instances=3",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

fn train_tiny(data: &Path, run: &Path, steps: u64, extra: &[&str]) -> Output {
    let steps = steps.to_string();
    let mut args = vec!["train", "--data", p(data), "--out", p(run), "--steps", &steps];
    for kv in TINY_NET {
        args.extend(["--set", kv]);
    }
    args.extend_from_slice(extra);
    partseg(&args)
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().unwrap() != "manifest.json" {
                out.push(path);
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_counts_determinism_and_validation() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    gen_tiny(&a);
    gen_tiny(&b);
    let fa = files_under(&a);
    assert_eq!(fa.len(), files_under(&b).len());
    for f in &fa {
        let g = b.join(f.strip_prefix(&a).unwrap());
        assert_eq!(std::fs::read(f).unwrap(), std::fs::read(g).unwrap(), "{}", f.display());
    }
    assert!(a.join("manifest.json").exists());

    let out = partseg(&["gen-data", "--out", p(&tmp.path().join("c")), "--set", "num_parts=0"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn seed_precedence() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("data.cfg");
    std::fs::write(&cfg, "seed = 5\nimage_size = 16\ntrain_instances = 1\nval_instances = 1\ntest_instances = 1\n").unwrap();
    let seed_of = |dir: &Path| -> u64 {
        let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
        m["seed"].as_u64().unwrap()
    };
    let run = |name: &str, extra: &[&str], env: Option<&str>| -> PathBuf {
        let dir = tmp.path().join(name);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_partseg"));
        cmd.args(["gen-data", "--out", p(&dir)]).args(extra).env_remove("PARTSEG_SEED");
        if let Some(v) = env {
            cmd.env("PARTSEG_SEED", v);
        }
        assert!(cmd.output().unwrap().status.success());
        dir
    };
    let c = p(&cfg);
    assert_eq!(seed_of(&run("flag", &["--config", c, "--seed", "9"], Some("7"))), 9);
    assert_eq!(seed_of(&run("file", &["--config", c], Some("7"))), 5);
    assert_eq!(seed_of(&run("env", &["--set", "image_size=16", "--set", "train_instances=1"], Some("7"))), 7);
    assert_eq!(seed_of(&run("default", &["--set", "image_size=16", "--set", "train_instances=1"], None)), 0);
}

#[test]
fn train_resume_infer_transfer_eval_report() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_tiny(&data);

    let straight = tmp.path().join("straight");
    let out = train_tiny(&data, &straight, 6, &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let split = tmp.path().join("split");
    assert_eq!(code(&train_tiny(&data, &split, 3, &[])), 0);
    let out = partseg(&["train", "--data", p(&data), "--out", p(&split), "--resume", "--steps", "6"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let ckpt = straight.join("checkpoints/latest.ckpt");
    assert_eq!(std::fs::read(&ckpt).unwrap(), std::fs::read(split.join("checkpoints/latest.ckpt")).unwrap());
    let lines = |dir: &Path| std::fs::read_to_string(dir.join("metrics.jsonl")).unwrap().lines().count();
    assert_eq!(lines(&straight), 6);
    assert_eq!(lines(&split), 6);
    assert!(split.join("manifest.1.json").exists());

    let missing = partseg(&["train", "--data", p(&tmp.path().join("nowhere")), "--out", p(&tmp.path().join("x"))]);
    assert_eq!(code(&missing), 2);

    // infer
    let pattern = format!("{}/test/*/00.png", data.display());
    let (m1, m2) = (tmp.path().join("masks1"), tmp.path().join("masks2"));
    for dir in [&m1, &m2] {
        let out = partseg(&["infer", "--checkpoint", p(&ckpt), "--input", &pattern, "--out", p(dir), "--probs"]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let masks: Vec<PathBuf> = files_under(&m1).into_iter().filter(|f| p(f).ends_with(".mask.png")).collect();
    assert!(!masks.is_empty());
    for mask in &masks {
        let (_, _, labels) = partseg_core::imageio::read_labels(mask).unwrap();
        assert!(labels.iter().all(|&l| l < 3));
        assert_eq!(std::fs::read(mask).unwrap(), std::fs::read(m2.join(mask.file_name().unwrap())).unwrap());
    }
    let bad = partseg(&["infer", "--checkpoint", p(&ckpt), "--input", "/no/such/*.png", "--out", p(&m1)]);
    assert_eq!(code(&bad), 2);
    assert!(stderr(&bad).contains("/no/such/*.png"));
    let big = tmp.path().join("big.png");
    partseg_core::imageio::write_rgb(&big, &partseg_core::imageio::RgbImage::new(32, 32)).unwrap();
    let mismatch = partseg(&["infer", "--checkpoint", p(&ckpt), "--input", p(&big), "--out", p(&m1)]);
    assert_eq!(code(&mismatch), 2);

    // transfer
    let pose = data.join("test/00000/00.png");
    let app = data.join("test/00001/00.png");
    let run_transfer = |parts: &str, a: &Path, out: &Path| {
        partseg(&["transfer", "--checkpoint", p(&ckpt), "--pose", p(&pose), "--appearance", p(a), "--parts", parts, "--out", p(out)])
    };
    let none = tmp.path().join("t/none.png");
    let all_same = tmp.path().join("t/all_same.png");
    assert_eq!(code(&run_transfer("", &app, &none)), 0);
    assert_eq!(code(&run_transfer("all", &pose, &all_same)), 0);
    assert_eq!(std::fs::read(&none).unwrap(), std::fs::read(&all_same).unwrap());
    let panel = partseg_core::imageio::read_rgb(&tmp.path().join("t/none.panel.png")).unwrap();
    assert_eq!((panel.width, panel.height), (48, 16));
    assert_eq!(code(&run_transfer("1,4", &app, &tmp.path().join("t/bad.png"))), 2);
    assert_eq!(code(&run_transfer("0", &app, &tmp.path().join("t/bad.png"))), 2);

    // eval, then eval with the saved mapping
    let report = tmp.path().join("report");
    let metrics = straight.join("metrics.jsonl");
    let out = partseg(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data), "--out", p(&report), "--metrics", p(&metrics)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = std::fs::read_to_string(report.join("iou.csv")).unwrap();
    let values: Vec<f64> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    let (overall, per_class) = values.split_last().unwrap();
    assert!((overall - per_class.iter().sum::<f64>() / per_class.len() as f64).abs() < 1e-12);
    assert!(report.join("loss_curve.png").exists() && report.join("qualitative.png").exists());
    let again = tmp.path().join("report2");
    let mapping = report.join("mapping.json");
    let out = partseg(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data), "--out", p(&again), "--mapping", p(&mapping)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(std::fs::read_to_string(again.join("iou.csv")).unwrap(), csv);
    std::fs::remove_dir_all(data.join("test")).unwrap();
    let out = partseg(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data), "--out", p(&again)]);
    assert_eq!(code(&out), 2);

    // report from an empty metrics log
    let empty = tmp.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let out = partseg(&["report", "--metrics", p(&empty), "--out", p(&tmp.path().join("r"))]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(std::fs::read_to_string(tmp.path().join("r/summary.txt")).unwrap().contains("no data"));
}

#[test]
fn diverging_training_exits_with_numeric_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_tiny(&data);
    let run = tmp.path().join("run");
    let out = train_tiny(&data, &run, 6, &["--set", "lr=1e30"]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    let dump = std::fs::read_to_string(run.join("nan_dump.json")).unwrap();
    assert!(dump.contains("rec="));
}

#[test]
fn smoke_profile_finishes_quickly() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = partseg(&["gen-data", "--out", p(&data), "--set", "train_instances=50", "--set", "val_instances=10", "--set", "test_instances=1"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let start = Instant::now();
    let out = partseg(&["train", "--data", p(&data), "--out", p(&tmp.path().join("run")), "--profile", "smoke"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(start.elapsed() < Duration::from_secs(120), "smoke run took {:?}", start.elapsed());
}
