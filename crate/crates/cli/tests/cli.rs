use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn emdl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_emdl")).args(args).env_remove("EMDL_THREADS").output().expect("run emdl")
}

fn code(args: &[&str]) -> i32 {
    emdl(args).status.code().expect("exit code")
}

fn stdout(args: &[&str]) -> String {
    let out = emdl(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A width-0.35, 32x32 model written into a fresh directory.
fn small_model() -> (TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.emdl");
    stdout(&["make-mobilenetv2", "--width", "0.35", "--size", "32", "--seed", "3", "-o", s(&path)]);
    (dir, path)
}

#[test]
fn usage_errors_exit_one() {
    let (dir, model) = small_model();
    let out = dir.path().join("o.emdl");
    assert_eq!(code(&["make-mobilenetv2", "--size", "100", "-o", s(&out)]), 1);
    assert_eq!(code(&["make-mobilenetv2", "--size", "32", "-o", ""]), 1);
    assert_eq!(code(&["inspect", ""]), 1);
    assert_eq!(code(&["compress", s(&model), "-o", s(&out), "--clusters", "1"]), 1);
    assert_eq!(code(&["compress", s(&model), "-o", s(&out), "--sparsity", "1.5"]), 1);
    assert_eq!(code(&["--threads", "1..2", "compress", s(&model), "-o", s(&out)]), 1);
    assert_eq!(code(&["--threads", "0", "inspect", s(&model)]), 1);
    assert_eq!(code(&["inspect", s(&model), "--bogus"]), 1);
    assert_eq!(code(&["frobnicate"]), 1);
    assert!(!out.exists());
}

#[test]
fn data_errors_exit_two() {
    let (dir, model) = small_model();
    let missing = dir.path().join("missing.emdl");
    assert_eq!(code(&["inspect", s(&missing)]), 2);

    let junk = dir.path().join("junk.emdl");
    fs::write(&junk, b"not a model").unwrap();
    assert_eq!(code(&["inspect", s(&junk)]), 2);

    let csv = dir.path().join("bad.csv");
    fs::write(&csv, "threads,p50\n1,2\n").unwrap();
    assert_eq!(code(&["plot", s(&csv), "-o", s(&dir.path().join("x.svg"))]), 2);

    let manifest = dir.path().join("m.csv");
    fs::write(&manifest, "path,label,subset\na.ppm,joy,-\n").unwrap();
    let out = emdl(&["eval", s(&model), "--manifest", s(&manifest)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown label 'joy' at line 2"));

    let calib = dir.path().join("calib.csv");
    fs::write(&calib, "path,label,subset\nnowhere.ppm,anger,-\n").unwrap();
    let out_model = dir.path().join("c.emdl");
    assert_eq!(code(&["compress", s(&model), "-o", s(&out_model), "--quantize", "--calib", s(&calib)]), 2);
}

#[test]
fn missing_subset_exits_two() {
    let (dir, model) = small_model();
    let img = dir.path().join("a.ppm");
    let mut bytes = b"P6\n2 2\n255\n".to_vec();
    bytes.extend([9u8; 12]);
    fs::write(&img, bytes).unwrap();
    let manifest = dir.path().join("m.csv");
    fs::write(&manifest, "path,label,subset\na.ppm,anger,B\n").unwrap();
    let out = emdl(&["eval", s(&model), "--manifest", s(&manifest), "--subset", "A"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("subset A empty"));
    let ok = stdout(&["eval", s(&model), "--manifest", s(&manifest), "--subset", "B"]);
    assert!(ok.contains("balanced_accuracy: "), "{ok}");
}

#[test]
fn make_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    for (p, seed) in [(&a, "9"), (&b, "9"), (&c, "10")] {
        stdout(&["make-mobilenetv2", "--width", "0.35", "--size", "32", "--seed", seed, "-o", s(p)]);
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
}

#[test]
fn sparsity_zero_alone_is_identity() {
    let (dir, model) = small_model();
    let out = dir.path().join("o.emdl");
    let text = stdout(&["compress", s(&model), "-o", s(&out), "--sparsity", "0"]);
    assert!(text.contains("ratio: 1.00"), "{text}");
    assert_eq!(fs::read(&model).unwrap(), fs::read(&out).unwrap());
}

#[test]
fn inspect_json_has_stable_keys() {
    let (_dir, model) = small_model();
    let v: serde_json::Value = serde_json::from_str(&stdout(&["inspect", s(&model), "--json"])).unwrap();
    for key in ["name", "labels", "params", "madds", "bytes", "layers"] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
    assert_eq!(v["labels"].as_array().unwrap().len(), 7);
    let layers = v["layers"].as_array().unwrap();
    let total: u64 = layers.iter().map(|l| l["params"].as_u64().unwrap()).sum();
    assert_eq!(total, v["params"].as_u64().unwrap());
}

#[test]
fn inspect_survives_a_closed_pipe() {
    let (_dir, model) = small_model();
    let mut child = Command::new(env!("CARGO_BIN_EXE_emdl"))
        .args(["inspect", s(&model)])
        .stdout(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    drop(child.stdout.take());
    assert_eq!(child.wait().unwrap().code(), Some(0));
}

#[test]
fn compress_json_report() {
    let (dir, model) = small_model();
    let out = dir.path().join("o.emdl");
    let text = stdout(&[
        "--json", "compress", s(&model), "-o", s(&out), "--clusters", "16", "--quantize", "--calib-random", "3",
    ]);
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let (orig, enc) = (v["original_bytes"].as_f64().unwrap(), v["encoded_bytes"].as_f64().unwrap());
    assert_eq!(v["ratio"].as_f64().unwrap(), orig / enc);
    assert!(!v["per_tensor"].as_array().unwrap().is_empty());
    let inspected: serde_json::Value = serde_json::from_str(&stdout(&["inspect", "--json", s(&out)])).unwrap();
    assert_eq!(inspected["quantized"], true);
    assert_eq!(inspected["bytes"]["encoded"].as_f64().unwrap(), enc);
}

#[test]
fn bench_single_thread_and_threads_env() {
    let (dir, model) = small_model();
    let csv = dir.path().join("b.csv");
    let text = stdout(&["bench", s(&model), "--threads", "1..1", "--warmup", "1", "--runs", "3", "--csv", s(&csv)]);
    assert!(text.contains("fastest p50 at 1 threads"), "{text}");
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 2);

    let out = Command::new(env!("CARGO_BIN_EXE_emdl"))
        .args(["bench", s(&model), "--warmup", "0", "--runs", "2", "--csv", s(&csv)])
        .env("EMDL_THREADS", "1..2")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 3);
}

#[test]
fn plot_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("b.csv");
    fs::write(
        &csv,
        "threads,runs,mean_ms,std_ms,min_ms,p50_ms,p90_ms,p99_ms,max_ms\n1,3,5.000,0.100,4.900,5.000,5.100,5.100,5.100\n",
    )
    .unwrap();
    let (a, b) = (dir.path().join("a.svg"), dir.path().join("b.svg"));
    stdout(&["plot", s(&csv), "-o", s(&a)]);
    stdout(&["plot", s(&csv), "-o", s(&b)]);
    let svg = fs::read_to_string(&a).unwrap();
    assert_eq!(svg, fs::read_to_string(&b).unwrap());
    assert_eq!(svg.matches("class=\"min\"").count(), 1);
    assert!(svg.contains("CPU threads") && svg.contains("p50 latency (ms)"));
}
