use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_trh"))
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn run(args: &[&str]) -> (i32, String) {
    let out = bin().args(args).output().unwrap();
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stdout).into_owned())
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_is_bitwise_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("example1_top.conf");
    let mut files = Vec::new();
    for run_id in ["a", "b"] {
        let out = dir.path().join(run_id);
        let (code, _) = run(&["train", "--config", path(&cfg), "--set", "train.epochs=4", "--seed", "3", "--out", path(&out)]);
        assert_eq!(code, 0);
        files.push(std::fs::read(out.join("metrics.csv")).unwrap());
        assert!(out.join("model.trhnet").exists());
    }
    assert_eq!(files[0], files[1]);
    let other = dir.path().join("c");
    run(&["train", "--config", path(&cfg), "--set", "train.epochs=4", "--seed", "4", "--out", path(&other)]);
    assert_ne!(std::fs::read(other.join("metrics.csv")).unwrap(), files[0]);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("example1_standard.conf");
    assert_eq!(run(&["train", "--config", "/nonexistent.conf"]).0, 1);
    assert_eq!(run(&["train", "--config", path(&cfg), "--set", "no.such_key=1"]).0, 1);
    assert_eq!(run(&["train", "--config", path(&cfg), "--set", "trh.lambda=-2"]).0, 1);
    assert_eq!(run(&["frobnicate"]).0, 1);
    let out = dir.path().join("diverged");
    let args = ["train", "--config", path(&cfg), "--set", "train.base_lr=1e9", "--set", "train.epochs=3", "--out", path(&out)];
    assert_eq!(run(&args).0, 2);
    assert!(out.join("model.trhnet").exists());
    assert_eq!(run(&["verify", "--level", "quick"]).0, 0);
    for fault in ["at", "trades", "trades_full", "alp", "mart", "layer"] {
        assert_eq!(run(&["verify", "--inject-fault", fault]).0, 3, "{fault}");
    }
    assert_eq!(run(&["verify", "--inject-fault", "bogus"]).0, 1);
}

#[test]
fn eval_is_reproducible_and_zero_radius_is_clean() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("example1_standard.conf");
    let out = dir.path().join("run");
    assert_eq!(run(&["train", "--config", path(&cfg), "--set", "train.epochs=3", "--out", path(&out)]).0, 0);
    let ckpt = out.join("model.trhnet");
    let eval = |extra: &[&str]| {
        let mut args = vec!["eval", "--checkpoint", path(&ckpt), "--config", path(&cfg)];
        args.extend_from_slice(extra);
        let (code, text) = run(&args);
        assert_eq!(code, 0);
        let field = |name: &str| -> f64 {
            text.split_whitespace().find_map(|t| t.strip_prefix(name)).unwrap().parse().unwrap()
        };
        (field("clean_acc="), field("robust_acc="))
    };
    let first = eval(&["--restarts", "3", "--steps", "5"]);
    assert_eq!(first, eval(&["--restarts", "3", "--steps", "5"]));
    let (clean, robust) = eval(&["--delta", "0"]);
    assert_eq!(clean.to_bits(), robust.to_bits());
    let wider = eval(&["--restarts", "3", "--steps", "5", "--delta", "0.3"]);
    assert!(wider.1 <= first.1);

    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "x1,x2,x3,label\n0,0,0,0\n1,1,1,1\n").unwrap();
    assert_eq!(run(&["eval", "--checkpoint", path(&ckpt), "--dataset", path(&bad)]).0, 1);
}

#[test]
fn sweep_duplicates_give_identical_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("example1_top.conf");
    let args = ["sweep", "--config", path(&cfg), "--set", "train.epochs=3", "--values", "0.5,0,0.5,-1", "--out", path(dir.path())];
    assert_eq!(run(&args).0, 0);
    let text = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], "value,clean_acc,robust_acc,status");
    assert_eq!(rows[1], rows[3]);
    assert!(rows[1].ends_with(",ok"));
    assert!(rows[4].starts_with("-1,NaN,NaN,"));
}

#[test]
fn trace_and_spectrum_write_their_logs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("example1_standard.conf");
    let small = ["--set", "train.epochs=2", "--set", "model.hidden=8,8"];
    let t = dir.path().join("trace");
    let mut args = vec!["trace", "--config", path(&cfg), "--measure", "top", "--out", path(&t)];
    args.extend_from_slice(&small);
    assert_eq!(run(&args).0, 0);
    let text = std::fs::read_to_string(t.join("trace.csv")).unwrap();
    assert!(text.starts_with("epoch,trh_top_analytic,trh_full_estimate,trh_full_stderr,trh_full_exact,trh_layer_1,trh_layer_2,trh_layer_3,"));
    assert_eq!(text.lines().count(), 4);
    assert!(text.lines().nth(1).unwrap().split(',').nth(2) == Some("NaN"));

    let s = dir.path().join("spectrum");
    let mut args = vec!["spectrum", "--config", path(&cfg), "--every", "2", "--out", path(&s)];
    args.extend_from_slice(&small);
    assert_eq!(run(&args).0, 0);
    let text = std::fs::read_to_string(s.join("spectrum.csv")).unwrap();
    assert_eq!(text.lines().next(), Some("epoch,layer,trace,trace_sq,eig_mean,eig_std"));
    assert_eq!(text.lines().count(), 1 + 2 * 4);
}
