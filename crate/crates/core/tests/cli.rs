use std::fs;
use std::process::{Command, Output};

fn msloc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msloc")).args(args).output().unwrap()
}

#[test]
fn corrupt_candidates_name_file_and_line() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |n: &str| tmp.path().join(n).to_string_lossy().into_owned();
    assert!(msloc(&["--seed", "3", "--set", "n_frames=30", "simulate", "--out", &p("sim")]).status.success());
    assert!(msloc(&["--seed", "3", "localize", "--queries", &p("sim/queries.txt"), "--out", &p("cand.txt")]).status.success());

    let text = fs::read_to_string(p("cand.txt")).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    let bad = lines.iter().position(|l| l.starts_with("M2D3D")).unwrap();
    lines[bad] = "M2D3D 1.0 oops 0 0 0";
    fs::write(p("bad.txt"), lines.join("\n")).unwrap();

    let out = msloc(&[
        "fuse", "--candidates", &p("bad.txt"), "--tracks", &p("sim/tracks.txt"),
        "--out-selection", &p("sel.txt"), "--out-trajectory", &p("fused.txt"),
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("kind=parse"), "{err}");
    assert!(err.contains("bad.txt"), "{err}");
    assert!(err.contains(&format!("line={}", bad + 1)), "{err}");
}

#[test]
fn missing_file_and_bad_override_fail() {
    let out = msloc(&["eval", "--truth", "/nonexistent/truth.txt", "--est", "x=/nonexistent/x.txt"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/truth.txt"));

    let out = msloc(&["--set", "lambda1=abc", "simulate", "--out", "/tmp/never"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error kind="));
}
