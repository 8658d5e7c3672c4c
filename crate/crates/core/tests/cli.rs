//! End-to-end runs of the `smsdc` binary.

use std::path::Path;
use std::process::{Command, Output};

use smsdc::data::read_features;

fn smsdc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_smsdc"))
        .args(args)
        .output()
        .expect("spawn smsdc")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(smsdc(&["train"]).status.code(), Some(1));
    assert_eq!(smsdc(&["evaluate", "--bogus"]).status.code(), Some(1));
    assert_eq!(smsdc(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(smsdc(&["synth-data", "--out", "x", "--spec", "colour=3"]).status.code(), Some(1));
    assert_eq!(smsdc(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let o = smsdc(&["evaluate", "--checkpoint", "/nonexistent/best.ckpt"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn synth_train_evaluate_embed() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let o = smsdc(&[
        "synth-data",
        "--spec",
        "train=40 val=10 test=10 video_dim=16 text_dim=16 seed=4",
        "--out",
        path(root),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["video.smdc", "text.smdc", "manifest.tsv", "train.conf"] {
        assert!(root.join(f).exists(), "{f} missing");
    }

    let conf = root.join("train.conf");
    let o = smsdc(&["train", "--config", path(&conf), "--override", "train.epochs=2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let log = std::fs::read_to_string(root.join("run/train.log")).unwrap();
    assert!(log.starts_with("# epoch loss lr val_rsum best"));
    assert_eq!(log.lines().count(), 3);

    let ckpt = root.join("run/best.ckpt");
    let o = smsdc(&["evaluate", "--checkpoint", path(&ckpt), "--split", "val", "--records"]);
    assert!(o.status.success());
    let records = stdout(&o);
    assert!(records.contains("t2v R@1 "));
    assert!(records.contains("all RSum "));
    let again = smsdc(&["evaluate", "--checkpoint", path(&ckpt), "--split", "val", "--records"]);
    assert_eq!(stdout(&again), records);

    let o = smsdc(&["evaluate", "--checkpoint", path(&ckpt)]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("RSum"));

    let out = root.join("text_emb.smdc");
    let o = smsdc(&["embed", "--checkpoint", path(&ckpt), "--side", "text", "--split", "test", "--out", path(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let emb = read_features(&out).unwrap();
    assert_eq!(emb.items().len(), 10);
    assert_eq!(emb.width(), 128);

    let o = smsdc(&["train", "--config", path(&conf), "--override", "train.epochs"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn grad_check_subset_passes() {
    let o = smsdc(&["grad-check", "--module", "ops"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).lines().all(|l| l.starts_with("ok")));
    assert_eq!(smsdc(&["grad-check", "--module", "nonsense"]).status.code(), Some(1));
}
