use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &str = "\
scene = one-sphere
image_size = 16
train_views = 4
test_views = 1
experts = 3
pretrain_iters = 5
joint_iters = 6
batch_rays = 32
samples = 16
base_resolution = 12
gate_resolution = 4
checkpoint_every = 3
";

fn moefield(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moefield")).args(args).env_remove("MOEFIELD_THREADS").output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "command failed: {}", stderr(&o));
    o
}

/// The small config with `extra` lines replacing keys of the same name.
fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("run.cfg");
    let key = |l: &str| l.split('=').next().unwrap().trim().to_string();
    let overridden: Vec<String> = extra.lines().map(key).collect();
    let base: String = SMALL.lines().filter(|l| !overridden.contains(&key(l))).map(|l| format!("{l}\n")).collect();
    fs::write(&path, format!("{base}out = {}\n{extra}", dir.join("run").display())).unwrap();
    path.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> =
        fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    v.sort();
    v
}

#[test]
fn gen_scene_writes_views_and_manifest_reproducibly() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(moefield(&["gen-scene", "one-sphere", "--seed", "1", "--out", s(&a)]));
    ok(moefield(&["gen-scene", "one-sphere", "--seed", "1", "--out", s(&b)]));
    let names = files(&a);
    assert_eq!(names.iter().filter(|n| n.ends_with(".ppm")).count(), 20);
    assert!(names.contains(&"manifest.txt".to_string()));
    assert_eq!(names, files(&b));
    for n in &names {
        assert_eq!(fs::read(a.join(n)).unwrap(), fs::read(b.join(n)).unwrap(), "{n} differs");
    }
}

#[test]
fn unknown_scene_lists_available_ones() {
    let tmp = TempDir::new().unwrap();
    let o = moefield(&["gen-scene", "teapot", "--out", s(&tmp.path().join("x"))]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("teapot") && err.contains("one-sphere") && err.contains("three-spheres-multifreq"), "{err}");
}

#[test]
fn top_k_above_expert_count_fails_before_writing() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "k = 4\n");
    let o = moefield(&["train", "--config", &cfg]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains('k'), "{}", stderr(&o));
    assert!(!tmp.path().join("run").exists());
}

#[test]
fn non_empty_output_needs_force() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    fs::create_dir(&out).unwrap();
    fs::write(out.join("keep.txt"), "x").unwrap();
    let o = moefield(&["gen-scene", "one-sphere", "--out", s(&out)]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("--force"));
    ok(moefield(&["gen-scene", "one-sphere", "--out", s(&out), "--force"]));
}

#[test]
fn train_then_resume_and_eval() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "");
    ok(moefield(&["train", "--config", &cfg]));
    let run = tmp.path().join("run");
    for f in ["pretrain.csv", "train.csv", "checkpoint"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let full = fs::read_to_string(run.join("train.csv")).unwrap();
    assert_eq!(full.lines().count(), 7);

    let resumed = tmp.path().join("resumed");
    let mid = run.join("checkpoints").join("iter_00003");
    ok(moefield(&["train", "--resume", s(&mid), "--out", s(&resumed)]));
    let tail = fs::read_to_string(resumed.join("train.csv")).unwrap();
    let full_rows: Vec<&str> = full.lines().skip(4).collect();
    let tail_rows: Vec<&str> = tail.lines().skip(1).collect();
    assert_eq!(full_rows, tail_rows);

    let ev = tmp.path().join("eval");
    ok(moefield(&["eval", "--checkpoint", s(&run.join("checkpoint")), "--out", s(&ev)]));
    let names = files(&ev);
    assert_eq!(names.iter().filter(|n| n.starts_with("render_")).count(), 1);
    assert_eq!(names.iter().filter(|n| n.starts_with("expert")).count(), 3);
    assert_eq!(names.iter().filter(|n| n.starts_with("gate")).count(), 3);
    let csv = fs::read_to_string(ev.join("eval.csv")).unwrap();
    assert!(csv.starts_with("psnr,ssim,w0,gflops\n"));

    let ens = tmp.path().join("ens");
    ok(moefield(&["ensemble-analyze", "--checkpoint", s(&run.join("checkpoint")), "--pair", "0,2", "--out", s(&ens)]));
    assert!(fs::read_to_string(ens.join("summary.txt")).unwrap().contains("optimal_alpha_exact"));
}

#[test]
fn eval_of_missing_checkpoint_fails() {
    let tmp = TempDir::new().unwrap();
    let o = moefield(&["eval", "--checkpoint", s(&tmp.path().join("nope")), "--out", s(&tmp.path().join("e"))]);
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("error:"));
}

#[test]
fn sweeps_write_one_row_per_setting() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "joint_iters = 2\n");
    for (axis, rows) in [("topk", 3), ("penalty", 4)] {
        ok(moefield(&["sweep", "--config", &cfg, "--axis", axis, "--force"]));
        let csv = fs::read_to_string(tmp.path().join("run").join("sweep.csv")).unwrap();
        assert_eq!(csv.lines().count(), rows + 1, "{axis}: {csv}");
    }
}

#[test]
fn random_ensemble_analysis() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("ens");
    ok(moefield(&["ensemble-analyze", "--random", "50", "--steps", "100", "--out", s(&out)]));
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 102);
    let summary = fs::read_to_string(out.join("summary.txt")).unwrap();
    assert!(summary.contains("outputs = 50"));
}

#[test]
fn thread_override_is_validated() {
    let tmp = TempDir::new().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_moefield"))
        .args(["ensemble-analyze", "--random", "5", "--out", s(&tmp.path().join("e"))])
        .env("MOEFIELD_THREADS", "zero")
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(stderr(&o).contains("MOEFIELD_THREADS"));
    let o = Command::new(env!("CARGO_BIN_EXE_moefield"))
        .args(["ensemble-analyze", "--random", "5", "--out", s(&tmp.path().join("e"))])
        .env("MOEFIELD_THREADS", "2")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
}
