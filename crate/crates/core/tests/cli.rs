use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mambatrack"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn mambatrack")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    assert_eq!(bin(&["--help"]).status.code(), Some(0));
    assert_eq!(bin(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(bin(&["bench", "--L", "8"]).status.code(), Some(1));
    assert_eq!(bin(&["gradcheck", "--scope", "everything"]).status.code(), Some(1));
}

#[test]
fn missing_checkpoint_is_an_io_failure() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin(&["eval", "--ckpt", p(&dir.path().join("none.ck")), "--data", p(dir.path())]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
}

#[test]
fn bench_echoes_its_config() {
    let o = bin(&["bench", "--L", "64", "--D", "4", "--N", "2", "--reps", "2", "--chunk", "16"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).starts_with("config L=64 D=4 N=2 reps=2 chunk=16"));
}

#[test]
fn gradcheck_primitives_pass() {
    let o = bin(&["gradcheck", "--scope", "primitives", "--seed", "4"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("PASS"));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("train.json");
    fs::write(&cfg, r#"{"stepz": 3}"#).unwrap();
    let o = bin(&["train", "--config", p(&cfg), "--data", p(dir.path()), "--out", p(&dir.path().join("m.ck"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn synth_train_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let synth_cfg = dir.path().join("synth.json");
    fs::write(&synth_cfg, r#"{"frames": 6, "seed": 5}"#).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = bin(&["synth", "--config", p(&synth_cfg), "--out", p(out)]);
        assert_eq!(o.status.code(), Some(0));
    }
    for f in ["frames.frm", "events.evt", "groundtruth.txt", "sequence.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }

    let train_cfg = dir.path().join("train.json");
    fs::write(
        &train_cfg,
        r#"{"steps": 3, "batch_size": 2, "d_model": 8, "d_inner": 16, "d_state": 2, "head_hidden": 4}"#,
    )
    .unwrap();
    let ck = dir.path().join("m.ck");
    let o = bin(&["train", "--config", p(&train_cfg), "--data", p(&a), "--out", p(&ck)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(&fs::read(&ck).unwrap()[..4], b"MTCK");

    let report = dir.path().join("report.txt");
    let o = bin(&["eval", "--ckpt", p(&ck), "--data", p(&a), "--sr-mode", "t50", "--report", p(&report)]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("SR"));
    let text = fs::read_to_string(&report).unwrap();
    assert!(text.contains("frames=5\n"), "{text}");
    let again = dir.path().join("again.txt");
    bin(&["eval", "--ckpt", p(&ck), "--data", p(&a), "--sr-mode", "t50", "--report", p(&again)]);
    assert_eq!(text, fs::read_to_string(&again).unwrap());

    fs::remove_file(a.join("groundtruth.txt")).unwrap();
    let o = bin(&["eval", "--ckpt", p(&ck), "--data", p(&a)]);
    assert_eq!(o.status.code(), Some(3));
}
