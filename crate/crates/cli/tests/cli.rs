use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_trus-seg"));
    c.env_remove("SEG_SEED");
    c
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).output().expect("spawn trus-seg")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

const TINY: &str = r#"
[model]
encoder_depth = 2
base_channels = 4
dilation_rates = [1, 2]
input_height = 32
input_width = 40

[training]
max_epochs = 5
batch_size = 8
val_fraction = 0.0
seed = 3
"#;

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    std::fs::write(&cfg, TINY).unwrap();
    (dir, cfg)
}

#[test]
fn help_exits_zero() {
    let out = bin().arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["preprocess", "phantom", "train", "finetune", "eval", "report", "sweep"] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn unknown_flag_exits_two() {
    let out = bin().args(["train", "--bogus"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_error_exits_two_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[training]\nlr = 0.001\nlearnrate = 1\n").unwrap();
    let out = run(&["--config", cfg.to_str().unwrap(), "train", "--data", "x"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3"), "{err}");
}

#[test]
fn bad_seed_env_is_config_error() {
    let out = bin().env("SEG_SEED", "abc").args(["train", "--data", "x"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_data_is_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["eval", "--ckpt", "nope", "--data", "nope"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn end_to_end_smoke() {
    let (dir, cfg) = setup();
    let d = dir.path();
    let cfg = cfg.to_str().unwrap();
    ok(&run(&["phantom", "--domain", "A", "--n", "4", "--seed", "7", "--dims", "6,32,40", "--out", "a"], d));
    ok(&run(&["phantom", "--domain", "C", "--n", "3", "--seed", "8", "--dims", "6,32,40", "--out", "c"], d));
    assert!(d.join("a/dataset.json").exists());

    let ms = ok(&run(&["--config", cfg, "train", "--data", "a", "--no-augment"], d));
    let ms_dir = PathBuf::from(ms.trim());
    let ms_dir = if ms_dir.is_absolute() { ms_dir } else { d.join(ms_dir) };
    assert!(ms_dir.starts_with(d.join("runs/M_s")), "{}", ms_dir.display());
    for f in ["config.toml", "checkpoint.toml", "weights.bin", "history.csv", "run.log", "seed.txt"] {
        assert!(ms_dir.join(f).exists(), "{f}");
    }
    let history = std::fs::read_to_string(ms_dir.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 6);

    ok(&run(&["--config", cfg, "eval", "--ckpt", ms_dir.to_str().unwrap(), "--data", "a", "--out", "eval/a.csv", "--surface-dir", "surf"], d));
    let csv = std::fs::read_to_string(d.join("eval/a.csv")).unwrap();
    let rows = csv.lines().filter(|l| l.starts_with("A_")).count();
    assert_eq!(rows, 4, "{csv}");

    // rerun from the echoed config reproduces the weights
    let echoed = ms_dir.join("config.toml");
    let again = ok(&run(&["--config", echoed.to_str().unwrap(), "train", "--run-dir", "again"], d));
    assert_eq!(again.trim(), "again");
    assert_eq!(
        std::fs::read(ms_dir.join("weights.bin")).unwrap(),
        std::fs::read(d.join("again/weights.bin")).unwrap()
    );

    let before = std::fs::read(ms_dir.join("weights.bin")).unwrap();
    let t1 = ok(&run(
        &["--config", cfg, "finetune", "--parent", ms_dir.to_str().unwrap(), "--data", "c", "--lambda", "0.2", "--mode", "kd", "--epochs", "2", "--run-dir", "t1"],
        d,
    ));
    assert_eq!(t1.trim(), "t1");
    assert_eq!(before, std::fs::read(ms_dir.join("weights.bin")).unwrap());
    let side = std::fs::read_to_string(d.join("t1/checkpoint.toml")).unwrap();
    assert!(side.contains("stage = \"M_t1\""), "{side}");

    let t2 = ok(&run(&["--config", cfg, "finetune", "--parent", "t1", "--data", "c", "--epochs", "1", "--run-dir", "t2"], d));
    assert_eq!(t2.trim(), "t2");
    let bad = run(&["--config", cfg, "finetune", "--parent", "t2", "--data", "c", "--epochs", "1", "--run-dir", "t3"], d);
    assert_eq!(bad.status.code(), Some(1));

    let rep = ok(&run(&["--config", cfg, "report", "--ckpts", ms_dir.to_str().unwrap(), "t1", "t2", "--domains", "a", "c", "--run-dir", "rep"], d));
    assert!(rep.starts_with("model,A,C,average"), "{rep}");
    assert!(d.join("rep/forgetting_bars.csv").exists());

    let sw = ok(&run(
        &["--config", cfg, "sweep", "--kind", "lambda", "--grid", "0,0.2", "--parent", ms_dir.to_str().unwrap(), "--target-train", "c", "--target-test", "c", "--epochs", "1", "--run-dir", "sw"],
        d,
    ));
    assert_eq!(sw.lines().count(), 3, "{sw}");
}
