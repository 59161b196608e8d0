use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

const BIN: &str = env!("CARGO_BIN_EXE_occaug");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("OCCAUG_CACHE").output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn toy(root: &Path, per_class: usize) -> PathBuf {
    let n = per_class.to_string();
    ok(&["make-toy", "--out", s(root), "--train-per-class", &n, "--test-per-class", &n]);
    root.to_path_buf()
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn prepare_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let root = toy(dir.path(), 2);
    let ann = root.join("train/annotations.json");
    let out = dir.path().join("prep");
    ok(&["prepare", "--annotations", s(&ann), "--out", s(&out)]);
    let first = read_dir_bytes(&out.join("plans"));
    assert_eq!(first.len(), 6);
    ok(&["prepare", "--annotations", s(&ann), "--out", s(&out)]);
    assert_eq!(read_dir_bytes(&out.join("plans")), first);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["status"], "ok");
}

#[test]
fn overlapping_parts_fail_validation_but_leave_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let ann = dir.path().join("ann.json");
    std::fs::write(
        &ann,
        r#"{"images": [{"id": 1, "file_name": "a.png", "width": 8, "height": 8, "category_id": 1}],
            "categories": [{"id": 1, "name": "x"}],
            "annotations": [
              {"id": 1, "image_id": 1, "segmentation": [[0, 0, 5, 0, 5, 5, 0, 5]]},
              {"id": 2, "image_id": 1, "segmentation": [[3, 3, 8, 3, 8, 8, 3, 8]]}]}"#,
    )
    .unwrap();
    let out = dir.path().join("prep");
    let res = run(&["prepare", "--annotations", s(&ann), "--out", s(&out)]);
    assert_eq!(res.status.code(), Some(1));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["status"], "invalid");

    ok(&["prepare", "--annotations", s(&ann), "--out", s(&out), "--lenient"]);
    assert_eq!(read_dir_bytes(&out.join("plans")).len(), 1);
}

#[test]
fn augment_is_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let root = toy(dir.path(), 1);
    let ann = root.join("train/annotations.json");
    let cache = dir.path().join("cache");
    let args = ["augment", "--annotations", s(&ann), "--method", "black-out", "--cache", s(&cache)];
    let first = String::from_utf8(ok(&args).stdout).unwrap();
    assert!(first.starts_with("3 new images"), "{first}");
    let method_dir = cache.join("black-out");
    let before = read_dir_bytes(&method_dir);
    assert_eq!(before.iter().filter(|(n, _)| n.ends_with(".png")).count(), 3);
    let second = String::from_utf8(ok(&args).stdout).unwrap();
    assert!(second.starts_with("0 new images"), "{second}");
    assert_eq!(read_dir_bytes(&method_dir), before);
}

#[test]
fn inpaint_cache_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let root = toy(dir.path(), 1);
    let ann = root.join("train/annotations.json");
    let mut runs = Vec::new();
    for name in ["a", "b"] {
        let cache = dir.path().join(name);
        ok(&["augment", "--annotations", s(&ann), "--method", "sd-inpaint", "--cache", s(&cache), "--seed", "4"]);
        runs.push(read_dir_bytes(&cache.join("sd-inpaint")));
    }
    assert_eq!(runs[0], runs[1]);
    let manifest = String::from_utf8(runs[0].iter().find(|(n, _)| n == "manifest.csv").unwrap().1.clone()).unwrap();
    assert!(manifest.contains("A class of"), "{manifest}");
}

#[test]
fn cutmix_is_not_cached() {
    let dir = tempfile::tempdir().unwrap();
    let root = toy(dir.path(), 1);
    let ann = root.join("train/annotations.json");
    let res = run(&["augment", "--annotations", s(&ann), "--method", "cutmix", "--cache", s(&dir.path().join("c"))]);
    assert_eq!(res.status.code(), Some(1));
}

#[test]
fn config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "epochs = 1\nlearning_rat = 0.1\n").unwrap();
    let res = run(&["train", "--config", s(&cfg)]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("learning_rat"));
    assert_eq!(run(&["train", "--method", "smudge"]).status.code(), Some(1));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let root = toy(dir.path(), 1);
    let res = run(&[
        "eval",
        "--checkpoint",
        s(&dir.path().join("nope")),
        "--annotations",
        s(&root.join("test/annotations.json")),
        "--out",
        s(&dir.path().join("rep")),
    ]);
    assert_eq!(res.status.code(), Some(2), "{}", String::from_utf8_lossy(&res.stderr));
}

#[test]
fn untrained_model_scores_near_chance_and_folder_is_scored() {
    let dir = tempfile::tempdir().unwrap();
    let root = toy(dir.path(), 6);
    let ckpt = dir.path().join("ckpt");
    let cfg = dir.path().join("untrained.toml");
    std::fs::write(&cfg, "epochs = 1\nlearning_rate = 0.0\n").unwrap();
    assert_eq!(run(&["train", "--epochs", "0", "--out", s(&ckpt)]).status.code(), Some(1));
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--annotations",
        s(&root.join("train/annotations.json")),
        "--method",
        "none",
        "--out",
        s(&ckpt),
    ]);
    let rep = dir.path().join("rep");
    ok(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--annotations",
        s(&root.join("test/annotations.json")),
        "--folder",
        s(&root.join("real")),
        "--method",
        "untrained",
        "--out",
        s(&rep),
    ]);
    let csv = std::fs::read_to_string(rep.join("report.csv")).unwrap();
    let top1: Vec<f64> = csv.lines().skip(1).map(|l| l.split(',').nth(3).unwrap().parse().unwrap()).collect();
    assert_eq!(top1.len(), 5);
    // 18 test images, three classes: a constant guess lands on 6 of them.
    assert!(top1.iter().all(|&t| t <= 0.75), "{top1:?}");
    let folder: serde_json::Value = serde_json::from_slice(&std::fs::read(rep.join("folder.json")).unwrap()).unwrap();
    assert_eq!(folder["images"], 18);
    for ext in ["md", "png"] {
        assert!(rep.join(format!("report.{ext}")).exists());
    }
}

#[test]
fn remote_backend_serves_inpainting() {
    let dir = tempfile::tempdir().unwrap();
    let root = toy(dir.path(), 1);
    let ann = root.join("train/annotations.json");
    let mut server = Command::new(BIN)
        .args(["serve-backend", "--listen", "127.0.0.1:0"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(server.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on ").unwrap().to_string();

    let remote = dir.path().join("remote");
    let mock = dir.path().join("mock");
    let spec = format!("remote:{addr}");
    let r = run(&["augment", "--annotations", s(&ann), "--method", "sd-inpaint", "--backend", &spec, "--cache", s(&remote)]);
    server.kill().unwrap();
    let _ = server.wait();
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    ok(&["augment", "--annotations", s(&ann), "--method", "sd-inpaint", "--cache", s(&mock)]);
    assert_eq!(read_dir_bytes(&remote.join("sd-inpaint")), read_dir_bytes(&mock.join("sd-inpaint")));
}
