use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use frnn_core::data::read_seq;
use tempfile::TempDir;

fn frnn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_frnn"))
        .args(args)
        .current_dir(dir)
        .env_remove("FRNN_SEED")
        .output()
        .expect("spawn frnn")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: Output) -> String {
    assert_eq!(
        o.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    stdout(&o)
}

/// Generates data and trains a small checkpoint in a fresh directory.
fn trained(steps: &str) -> TempDir {
    let dir = TempDir::new().unwrap();
    ok(frnn(dir.path(), &["gen-data", "--count", "4", "--out", "d.seq"]));
    ok(frnn(
        dir.path(),
        &[
            "train", "--data", "d.seq", "--steps", steps, "--checkpoint-out", "m.ck", "--g", "3",
            "--p", "3", "--batch-size", "2",
        ],
    ));
    dir
}

#[test]
fn usage_errors_exit_two() {
    let dir = TempDir::new().unwrap();
    assert_eq!(frnn(dir.path(), &[]).status.code(), Some(2));
    assert_eq!(frnn(dir.path(), &["gen-data", "--count", "2"]).status.code(), Some(2));
    assert_eq!(frnn(dir.path(), &["nonsense"]).status.code(), Some(2));
}

#[test]
fn help_goes_to_stdout() {
    let dir = TempDir::new().unwrap();
    let text = ok(frnn(dir.path(), &["--help"]));
    assert!(text.contains("gen-data") && text.contains("ablate"));
}

#[test]
fn runtime_errors_exit_one() {
    let dir = TempDir::new().unwrap();
    let o = frnn(dir.path(), &["train", "--data", "missing.seq", "--checkpoint-out", "m.ck"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
}

#[test]
fn gen_data_is_seeded() {
    let dir = TempDir::new().unwrap();
    ok(frnn(dir.path(), &["gen-data", "--count", "4", "--out", "a.seq"]));
    ok(frnn(dir.path(), &["gen-data", "--count", "4", "--out", "b.seq"]));
    ok(frnn(dir.path(), &["--seed", "5", "gen-data", "--count", "4", "--out", "c.seq"]));
    let a = fs::read(dir.path().join("a.seq")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b.seq")).unwrap());
    assert_ne!(a, fs::read(dir.path().join("c.seq")).unwrap());
    let batch = read_seq(&dir.path().join("a.seq")).unwrap();
    assert_eq!(batch.shape(), [4, 20, 1, 32, 32]);
}

#[test]
fn env_seed_is_overridden_by_flag() {
    let dir = TempDir::new().unwrap();
    let run = |name: &str, env: Option<&str>, flag: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_frnn"));
        cmd.current_dir(dir.path()).env_remove("FRNN_SEED");
        if let Some(s) = env {
            cmd.env("FRNN_SEED", s);
        }
        if let Some(s) = flag {
            cmd.args(["--seed", s]);
        }
        ok(cmd.args(["gen-data", "--count", "2", "--out", name]).output().unwrap());
        fs::read(dir.path().join(name)).unwrap()
    };
    let env3 = run("e.seq", Some("3"), None);
    let flag3 = run("f.seq", None, Some("3"));
    let both = run("b.seq", Some("9"), Some("3"));
    let default = run("d.seq", None, None);
    assert_eq!(env3, flag3);
    assert_eq!(both, flag3);
    assert_ne!(env3, default);
}

#[test]
fn train_writes_loss_log() {
    let dir = trained("10");
    let log = fs::read_to_string(dir.path().join("m.ck.loss.txt")).unwrap();
    let rows: Vec<_> = log.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 10);
    for (i, row) in rows.iter().enumerate() {
        let mut it = row.split_whitespace();
        assert_eq!(it.next().unwrap().parse::<usize>().unwrap(), i + 1);
        let loss: f64 = it.next().unwrap().parse().unwrap();
        assert!(loss.is_finite() && loss >= 0.0);
    }
}

#[test]
fn resume_continues_step_count() {
    let dir = trained("2");
    let text = ok(frnn(
        dir.path(),
        &["train", "--data", "d.seq", "--steps", "1", "--resume", "m.ck", "--checkpoint-out", "n.ck"],
    ));
    assert!(text.contains("trained to step 3"), "{text}");
}

#[test]
fn predict_outputs_frames_and_grid() {
    let dir = trained("2");
    let text = ok(frnn(
        dir.path(),
        &[
            "predict", "--checkpoint", "m.ck", "--data", "d.seq", "--g", "3", "--p", "5", "--out",
            "p.seq", "--grid", "g.pgm",
        ],
    ));
    assert!(text.contains("encoder top-layer calls 3 (g = 3)"), "{text}");
    let preds = read_seq(&dir.path().join("p.seq")).unwrap();
    assert_eq!(preds.shape(), [4, 5, 1, 32, 32]);
    assert!(preds.values().data().iter().all(|v| (0.0..=1.0).contains(v)));

    let pgm = fs::read(dir.path().join("g.pgm")).unwrap();
    let header = b"P5\n160 96\n255\n";
    assert_eq!(&pgm[..header.len()], header);
    assert_eq!(pgm.len(), header.len() + 160 * 96);
}

#[test]
fn evaluate_prints_model_and_baseline() {
    let dir = trained("2");
    let text = ok(frnn(
        dir.path(),
        &["evaluate", "--checkpoint", "m.ck", "--data", "d.seq", "--g", "3", "--p", "4", "--baseline"],
    ));
    assert!(text.contains("## model") && text.contains("## last-frame baseline"));
    let rows = text.lines().filter(|l| !l.starts_with('#')).count();
    assert_eq!(rows, 8);
    assert_eq!(text.matches("# mean").count(), 2);
}

#[test]
fn ablate_prints_one_table_per_removal() {
    let dir = trained("2");
    let text = ok(frnn(
        dir.path(),
        &[
            "ablate", "--checkpoint", "m.ck", "--data", "d.seq", "--g", "3", "--p", "2",
            "--max-remove", "4", "--out-dir", "abl",
        ],
    ));
    assert_eq!(text.matches("# mean").count(), 5);
    for k in 0..=4 {
        assert!(dir.path().join(format!("abl/ablate_k{k}.txt")).exists());
    }
    let o = frnn(
        dir.path(),
        &["ablate", "--checkpoint", "m.ck", "--data", "d.seq", "--max-remove", "5"],
    );
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn cost_for_full_preset() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("full.cfg"), "topology.preset = full\n").unwrap();
    let text = ok(frnn(dir.path(), &["--config", "full.cfg", "cost"]));
    let row = |name: &str| {
        text.lines()
            .find(|l| l.starts_with(name))
            .unwrap_or_else(|| panic!("no {name} row in {text}"))
            .split_whitespace()
            .skip(1)
            .collect::<Vec<_>>()
            .join(" ")
    };
    assert_eq!(row("gate_evaluations"), "170 320 1.882");
    assert_eq!(row("peak_live_states"), "9 18 2.000");
    assert!(text.contains(" 1.500") && text.contains(" 1.444"));
}

#[test]
fn readers_reject_wrong_file_kind() {
    let dir = trained("1");
    let o = frnn(dir.path(), &["train", "--data", "m.ck", "--checkpoint-out", "x.ck"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad magic"));
    let o = frnn(
        dir.path(),
        &["evaluate", "--checkpoint", "d.seq", "--data", "d.seq", "--g", "3", "--p", "2"],
    );
    assert_eq!(o.status.code(), Some(1));
}
