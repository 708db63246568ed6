use std::path::Path;
use std::process::{Command, Output};

fn lmk3d(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lmk3d")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    assert_eq!(code(&lmk3d(&[])), 1);
    assert_eq!(code(&lmk3d(&["synth", "--bogus"])), 1);
    assert_eq!(code(&lmk3d(&["synth", "--variant", "sideways", "--out", p(&out)])), 1);
    assert_eq!(code(&lmk3d(&["synth", "--set", "synth.nope=1", "--out", p(&out)])), 1);
    assert_eq!(code(&lmk3d(&["synth", "--set", "synth.count=0", "--out", p(&out)])), 1);
    assert_eq!(code(&lmk3d(&["gradcheck", "nonsense", "--out", p(&out)])), 1);
    assert_eq!(code(&lmk3d(&["--help"])), 0);
}

#[test]
fn data_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing");
    let out = lmk3d(&["train", "--data", p(&missing), "--out", p(&dir.path().join("o"))]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));

    // volumes that do not match the model input
    let data = dir.path().join("data");
    assert_eq!(code(&lmk3d(&["synth", "--set", "synth.count=1", "--set", "synth.dims=[16, 16, 8]", "--out", p(&data)])), 0);
    let out = lmk3d(&["train", "--data", p(&data), "--out", p(&dir.path().join("t"))]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("crop"));
}

#[test]
fn corrupted_gradcheck_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("g");
    assert_eq!(code(&lmk3d(&["gradcheck", "losses", "--out", p(&out)])), 0);
    let bad = lmk3d(&["gradcheck", "losses", "--corrupt-gradient", "--out", p(&out)]);
    assert_eq!(code(&bad), 3);
    assert!(std::fs::read_to_string(out.join("gradcheck.txt")).unwrap().contains("FAIL"));
}

#[test]
fn every_run_echoes_its_config() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = lmk3d(&["synth", "--seed", "4", "--set", "synth.count=2", "--out", p(&data)]);
    assert_eq!(code(&out), 0);
    let echo = std::fs::read_to_string(data.join("resolved_config.toml")).unwrap();
    assert!(echo.contains("seed = 4"));
    assert!(echo.contains("count = 2"));

    // rerunning from the echo reproduces the data
    let again = dir.path().join("again");
    let cfg = data.join("resolved_config.toml");
    assert_eq!(code(&lmk3d(&["synth", "--config", p(&cfg), "--out", p(&again)])), 0);
    for f in ["case_000.landmarks", "case_001.landmarks"] {
        assert_eq!(std::fs::read(data.join(f)).unwrap(), std::fs::read(again.join(f)).unwrap());
    }
}

#[test]
fn eval_of_ground_truth_against_itself_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&lmk3d(&["synth", "--set", "synth.count=3", "--out", p(&data)])), 0);
    let out = lmk3d(&["eval", "--pred", p(&data), "--gt", p(&data), "--out", p(&dir.path().join("e"))]);
    assert_eq!(code(&out), 0);
    let report = std::fs::read_to_string(dir.path().join("e/eval_report.txt")).unwrap();
    assert!(report.contains("0.00 ± 0.00"), "{report}");
}

#[test]
fn infer_rejects_a_different_model_config() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let small = ["--set", "model.channels=[4, 8]", "--set", "train.steps=1"];
    assert_eq!(code(&lmk3d(&["synth", "--set", "synth.count=1", "--out", p(&data)])), 0);
    let out = lmk3d(&[&["train", "--data", p(&data), "--out", p(&run)][..], &small].concat());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = run.join("model.ckpt");

    let ok = lmk3d(&["infer", "--checkpoint", p(&ckpt), "--data", p(&data), "--out", p(&dir.path().join("a"))]);
    assert_eq!(code(&ok), 0, "{}", String::from_utf8_lossy(&ok.stderr));
    assert!(dir.path().join("a/case_000.landmarks").exists());

    let mismatched = lmk3d(&[
        "infer",
        "--checkpoint",
        p(&ckpt),
        "--data",
        p(&data),
        "--set",
        "model.channels=[4, 16]",
        "--out",
        p(&dir.path().join("b")),
    ]);
    assert_eq!(code(&mismatched), 2);
    assert!(String::from_utf8_lossy(&mismatched.stderr).contains("resolved_config.toml"));
}
