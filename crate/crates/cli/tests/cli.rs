//! Black-box tests of the `pafu-kv` binary: file flows, exit codes, and
//! output conventions.

use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

use pafu_core::io::{read_tensor, write_tensor};
use pafu_core::tensor::Tensor;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pafu-kv"))
}

fn workdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("pafu-cli-{}-{tag}", std::process::id()));
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

const SMALL_CONFIG: &str = "heads = 2\nhead_dim = 8\nframe_tokens = 8\nchunk_frames = 2\n\
    capacity = 48\nblock_len = 16\nsink_count = 8\ntimesteps = 3\nseh_hidden = 16\n\
    seh_out = 4\nlr = 1e-3\ntrain_chunks = 3\n";

#[test]
fn salience_on_zero_keys_is_uniform() {
    let dir = workdir("uniform");
    let (b, n, l, d) = (1, 2, 12, 4);
    let mut vals = Vec::new();
    for i in 0..b * n * l * d {
        vals.push(((i as f64) * 0.37).sin());
    }
    write_tensor(dir.join("q.pfkv"), &Tensor::from_vec(&[b, n, l, d], vals).unwrap()).unwrap();
    write_tensor(dir.join("k.pfkv"), &Tensor::zeros(&[b, n, l, d])).unwrap();

    let out = run(bin()
        .args(["salience", "--block-len", "4"])
        .arg("--q")
        .arg(dir.join("q.pfkv"))
        .arg("--k")
        .arg(dir.join("k.pfkv"))
        .arg("--out")
        .arg(dir.join("s.pfkv")));
    assert!(out.status.success(), "{out:?}");

    let s = read_tensor(dir.join("s.pfkv")).unwrap();
    assert_eq!(s.dims(), &[1, 12]);
    for &v in s.data() {
        assert!((v - 1.0 / 12.0).abs() < 1e-6, "expected 1/12, got {v}");
    }
}

#[test]
fn overlap_of_a_file_with_itself_prints_one() {
    let dir = workdir("overlap");
    let t = Tensor::from_vec(&[8], vec![0.1, 0.9, 0.3, 0.7, 0.2, 0.8, 0.4, 0.6]).unwrap();
    write_tensor(dir.join("a.pfkv"), &t).unwrap();
    let out = run(bin()
        .args(["analyze", "overlap", "--k", "5"])
        .arg("--a")
        .arg(dir.join("a.pfkv"))
        .arg("--b")
        .arg(dir.join("a.pfkv")));
    assert!(out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "1.0");
}

#[test]
fn unknown_policy_is_usage_error() {
    let out = run(bin().args([
        "simulate",
        "--config",
        "/dev/null",
        "--policy",
        "lifo",
        "--frames",
        "4",
        "--out-trace",
        "/dev/null",
    ]));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn nan_input_exits_three() {
    let dir = workdir("nan");
    let mut q = Tensor::zeros(&[1, 1, 2, 2]);
    q.data_mut()[1] = f64::NAN;
    // write_tensor validates nothing; NaN survives the f32 truncation.
    write_tensor(dir.join("q.pfkv"), &q).unwrap();
    write_tensor(dir.join("k.pfkv"), &Tensor::zeros(&[1, 1, 2, 2])).unwrap();
    let out = run(bin()
        .args(["salience", "--block-len", "2"])
        .arg("--q")
        .arg(dir.join("q.pfkv"))
        .arg("--k")
        .arg(dir.join("k.pfkv"))
        .arg("--out")
        .arg(dir.join("s.pfkv")));
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error[non-finite]:"), "{err}");
}

#[test]
fn corrupt_tensor_reports_format_error() {
    let dir = workdir("corrupt");
    fs::write(dir.join("bad.pfkv"), b"XXXX-not-a-tensor").unwrap();
    let out = run(bin()
        .args(["salience", "--block-len", "2"])
        .arg("--q")
        .arg(dir.join("bad.pfkv"))
        .arg("--k")
        .arg(dir.join("bad.pfkv"))
        .arg("--out")
        .arg(dir.join("s.pfkv")));
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error[format]: format error at byte 0"), "{err}");
}

#[test]
fn invalid_config_is_rejected_with_exit_two() {
    let dir = workdir("badcfg");
    fs::write(dir.join("bad.cfg"), "capacity = 10\n").unwrap();
    let out = run(bin()
        .args(["simulate", "--policy", "fifo", "--frames", "4"])
        .arg("--config")
        .arg(dir.join("bad.cfg"))
        .arg("--out-trace")
        .arg(dir.join("t.jsonl")));
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("capacity 10"), "{err}");
}

#[test]
fn simulate_writes_parseable_trace_and_summary() {
    let dir = workdir("simulate");
    fs::write(dir.join("run.cfg"), SMALL_CONFIG).unwrap();
    let out = run(bin()
        .args(["simulate", "--policy", "salience", "--frames", "12", "--seed", "5"])
        .arg("--config")
        .arg(dir.join("run.cfg"))
        .arg("--out-trace")
        .arg(dir.join("t.jsonl")));
    assert!(out.status.success(), "{out:?}");

    let summary: serde_json::Value =
        serde_json::from_slice(&out.stdout).expect("summary is JSON");
    assert_eq!(summary["chunks"], 6);
    assert_eq!(summary["policy"], "salience");

    let trace = fs::read_to_string(dir.join("t.jsonl")).unwrap();
    let records: Vec<serde_json::Value> = trace
        .lines()
        .map(|l| serde_json::from_str(l).expect("each line is JSON"))
        .collect();
    assert_eq!(records.len(), 6);
    for (i, r) in records.iter().enumerate() {
        assert_eq!(r["chunk"], i as u64 + 1);
        assert!(r["cache_after"].as_u64().unwrap() <= 48);
    }
}

#[test]
fn train_then_simulate_with_checkpoint() {
    let dir = workdir("ckpt-flow");
    fs::write(dir.join("run.cfg"), SMALL_CONFIG).unwrap();
    let out = run(bin()
        .args(["train-seh", "--steps", "10"])
        .arg("--config")
        .arg(dir.join("run.cfg"))
        .arg("--out-ckpt")
        .arg(dir.join("seh.ckpt"))
        .arg("--out-curve")
        .arg(dir.join("curve.csv")));
    assert!(out.status.success(), "{out:?}");
    let curve = fs::read_to_string(dir.join("curve.csv")).unwrap();
    assert!(curve.starts_with("step,loss,overlap\n"));
    assert_eq!(curve.lines().count(), 11);

    // Config pointing at the checkpoint scores chunks with the head.
    let cfg = format!("{SMALL_CONFIG}seh_checkpoint = {}\n", dir.join("seh.ckpt").display());
    fs::write(dir.join("seh.cfg"), cfg).unwrap();
    let out = run(bin()
        .args(["simulate", "--policy", "salience", "--frames", "8"])
        .arg("--config")
        .arg(dir.join("seh.cfg"))
        .arg("--out-trace")
        .arg(dir.join("t.jsonl")));
    assert!(out.status.success(), "{out:?}");
}

#[test]
fn checkpoint_with_wrong_dims_is_rejected() {
    let dir = workdir("ckpt-dims");
    fs::write(dir.join("run.cfg"), SMALL_CONFIG).unwrap();
    // Train a head for a 2-head, 8-dim model...
    let out = run(bin()
        .args(["train-seh", "--steps", "2"])
        .arg("--config")
        .arg(dir.join("run.cfg"))
        .arg("--out-ckpt")
        .arg(dir.join("seh.ckpt"))
        .arg("--out-curve")
        .arg(dir.join("curve.csv")));
    assert!(out.status.success());

    // ...then point a 1-head model at it: feature widths disagree.
    let cfg = format!(
        "heads = 1\nhead_dim = 8\nframe_tokens = 8\nchunk_frames = 2\ncapacity = 48\n\
         block_len = 16\nsink_count = 8\ntimesteps = 3\nseh_checkpoint = {}\n",
        dir.join("seh.ckpt").display()
    );
    fs::write(dir.join("mismatch.cfg"), cfg).unwrap();
    let out = run(bin()
        .args(["simulate", "--policy", "salience", "--frames", "4"])
        .arg("--config")
        .arg(dir.join("mismatch.cfg"))
        .arg("--out-trace")
        .arg(dir.join("t.jsonl")));
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error[shape]:"), "{err}");
}

#[test]
fn histogram_writes_seven_by_seven_csv() {
    let dir = workdir("hist");
    let l = 14;
    let mut p = Tensor::zeros(&[1, 1, l, l]);
    for i in 0..l {
        *p.at_mut(&[0, 0, i, i]) = 1.0;
    }
    write_tensor(dir.join("p.pfkv"), &p).unwrap();
    let out = run(bin()
        .args(["analyze", "histogram"])
        .arg("--p")
        .arg(dir.join("p.pfkv"))
        .arg("--out")
        .arg(dir.join("h.csv")));
    assert!(out.status.success());
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["total"], 14);
    assert_eq!(summary["diagonal_share"], 1.0);
    let csv = fs::read_to_string(dir.join("h.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 7);
    for (i, row) in rows.iter().enumerate() {
        let cells: Vec<u64> = row.split(',').map(|c| c.parse().unwrap()).collect();
        assert_eq!(cells.len(), 7);
        assert_eq!(cells[i], 2, "identity attention fills the diagonal");
    }
}
