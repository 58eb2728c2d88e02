use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn percgan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_percgan"))
        .args(args)
        .env_remove("PERCGAN_OUT_ROOT")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = percgan(args);
    assert!(
        out.status.success(),
        "{args:?} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, categories: usize, per_category: usize) -> PathBuf {
    let data = dir.join("data");
    ok(&[
        "gen-data",
        "--categories",
        &categories.to_string(),
        "--per-category",
        &per_category.to_string(),
        "--side",
        "16",
        "--d-h",
        "8",
        "--seed",
        "7",
        "--out",
        s(&data),
    ]);
    data
}

fn train(data: &Path, out: &Path, extra: &[&str]) {
    let mut args = vec!["train", "--data", s(data), "--out", s(out), "--steps", "4", "--batch", "4", "--seed", "3"];
    args.extend_from_slice(extra);
    ok(&args);
}

fn files_under(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_writes_every_image_deterministically() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let da = gen(a.path(), 3, 5);
    let db = gen(b.path(), 3, 5);
    let images = fs::read_dir(da.join("images")).unwrap().count();
    assert_eq!(images, 15);
    assert!(da.join("run_config.json").exists());
    let content = |d: &Path| files_under(d).into_iter().filter(|(p, _)| p != Path::new("run_config.json")).collect::<Vec<_>>();
    assert_eq!(content(&da), content(&db));
}

#[test]
fn missing_out_is_a_usage_error() {
    let out = percgan(&["gen-data", "--categories", "3"]);
    assert_eq!(out.status.code(), Some(1));
    let tmp = TempDir::new().unwrap();
    let data = gen(tmp.path(), 3, 4);
    let out = percgan(&["train", "--data", s(&data), "--steps", "1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--out"));
}

#[test]
fn out_root_env_supplies_default_directory() {
    let tmp = TempDir::new().unwrap();
    let data = gen(tmp.path(), 3, 4);
    let root = tmp.path().join("root");
    let out = Command::new(env!("CARGO_BIN_EXE_percgan"))
        .args(["train", "--data", s(&data), "--steps", "2", "--batch", "2", "--variant", "pixel"])
        .env("PERCGAN_OUT_ROOT", &root)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(root.join("runs/pixel/final/checksum.crc32").exists());
}

#[test]
fn unknown_variant_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let data = gen(tmp.path(), 3, 4);
    let out = percgan(&["train", "--data", s(&data), "--out", s(&tmp.path().join("r")), "--variant", "style"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn zero_lambda_log_matches_baseline() {
    let tmp = TempDir::new().unwrap();
    let data = gen(tmp.path(), 3, 6);
    let gram = tmp.path().join("gram");
    let none = tmp.path().join("none");
    train(&data, &gram, &["--variant", "gram", "--lambda", "0"]);
    train(&data, &none, &["--variant", "none"]);
    let a = fs::read(gram.join("metrics.jsonl")).unwrap();
    let b = fs::read(none.join("metrics.jsonl")).unwrap();
    assert_eq!(a, b);
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 4);
}

#[test]
fn training_reruns_are_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let data = gen(tmp.path(), 3, 6);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    train(&data, &a, &["--variant", "vgg"]);
    train(&data, &b, &["--variant", "vgg"]);
    assert_eq!(files_under(&a.join("final")), files_under(&b.join("final")));
    assert_eq!(fs::read(a.join("metrics.jsonl")).unwrap(), fs::read(b.join("metrics.jsonl")).unwrap());
}

#[test]
fn sample_grid_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let data = gen(tmp.path(), 3, 6);
    let run = tmp.path().join("run");
    train(&data, &run, &[]);
    let ckpt = run.join("final");
    let g1 = tmp.path().join("g1.ppm");
    let g2 = tmp.path().join("g2.ppm");
    ok(&["sample", "--ckpt", s(&ckpt), "--grid", "2x3", "--out", s(&g1)]);
    ok(&["sample", "--ckpt", s(&ckpt), "--data", s(&data), "--grid", "2x3", "--out", s(&g2)]);
    let a = fs::read(&g1).unwrap();
    assert_eq!(a, fs::read(&g2).unwrap());
    assert!(a.starts_with(b"P6\n48 32\n255\n"));
}

#[test]
fn sample_from_missing_checkpoint_fails() {
    let tmp = TempDir::new().unwrap();
    let out = percgan(&["sample", "--ckpt", s(&tmp.path().join("nope")), "--out", s(&tmp.path().join("g.ppm"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint"));
}

#[test]
fn eval_refuses_an_untrained_classifier() {
    let tmp = TempDir::new().unwrap();
    let data = gen(tmp.path(), 3, 6);
    let run = tmp.path().join("run");
    train(&data, &run, &[]);
    let cls = tmp.path().join("cls");
    let out = percgan(&["train-classifier", "--data", s(&data), "--out", s(&cls), "--epochs", "0"]);
    assert_eq!(out.status.code(), Some(1));
    let out = percgan(&[
        "eval",
        "--ckpt",
        s(&run.join("final")),
        "--classifier",
        s(&cls),
        "--n-per-query",
        "4",
        "--out",
        s(&tmp.path().join("report.json")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("accuracy"));
    assert!(!tmp.path().join("report.json").exists());
}

#[test]
fn gradcheck_reports_each_check() {
    let out = ok(&["gradcheck", "--op", "conv2d"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 6);
    assert!(!text.contains("FAIL "));
}

#[test]
fn gradcheck_fault_injection_fails_loudly() {
    let tmp = TempDir::new().unwrap();
    let json = tmp.path().join("g.json");
    let out = percgan(&["gradcheck", "--op", "relu", "--inject-fault", "--json", s(&json)]);
    assert_eq!(out.status.code(), Some(2));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().any(|l| l.starts_with("FAIL") && l.contains("fault/")));
    let parsed: serde_json::Value = serde_json::from_slice(&fs::read(json).unwrap()).unwrap();
    assert!(parsed.as_array().unwrap().len() >= 2);
}

#[test]
fn gradcheck_unknown_op_is_a_usage_error() {
    let out = percgan(&["gradcheck", "--op", "fft"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn compare_writes_one_row_per_variant() {
    let tmp = TempDir::new().unwrap();
    let data = gen(tmp.path(), 4, 20);
    let table = tmp.path().join("cmp/table.csv");
    ok(&["compare", "--data", s(&data), "--steps", "2", "--batch", "4", "--seeds", "1", "--n-per-query", "5", "--out", s(&table)]);
    let csv = fs::read_to_string(&table).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    for (row, variant) in rows.iter().zip(["none", "pixel", "vgg", "gram"]) {
        assert!(row.starts_with(variant), "{row}");
    }
    assert!(tmp.path().join("cmp/table.json").exists());
    assert!(tmp.path().join("cmp/runs/gram/seed-0/eval.json").exists());
}
