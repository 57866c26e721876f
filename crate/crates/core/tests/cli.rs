use std::fs;
use std::io::Write;
use std::process::{Command, Output, Stdio};

fn frametag(args: &[&str], envs: &[(&str, &str)], stdin: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_frametag"));
    cmd.args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped());
    for (k, v) in envs {
        cmd.env(k, v);
    }
    let mut child = cmd.spawn().expect("binary runs");
    let mut pipe = child.stdin.take().unwrap();
    if let Some(text) = stdin {
        pipe.write_all(text.as_bytes()).unwrap();
    }
    drop(pipe);
    child.wait_with_output().unwrap()
}

#[test]
fn generated_trace_matches_its_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("w.trace");
    let manifest = dir.path().join("w.json");
    let out = frametag(
        &[
            "gen",
            "--seed",
            "11",
            "--objects",
            "150",
            "--faults",
            "0.1",
            "--out",
            trace.to_str().unwrap(),
            "--manifest",
            manifest.to_str().unwrap(),
        ],
        &[],
        None,
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let out = frametag(
        &[
            "run",
            trace.to_str().unwrap(),
            "--manifest",
            manifest.to_str().unwrap(),
        ],
        &[],
        None,
    );
    assert_eq!(out.status.code(), Some(0));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains(" 0 missed, 0 spurious"), "{stderr}");
}

#[test]
fn json_report_from_stdin() {
    let out = frametag(
        &["run", "-", "--json"],
        &[],
        Some("alloc p 10\nstore p 8 4\n"),
    );
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["verdicts"]["overflow"], 1);
    assert_eq!(v["violations"][0]["op"], "store");
}

#[test]
fn fail_on_violation_sets_exit_status() {
    let trace = "alloc p 10\nstore p 8 4\n";
    assert_eq!(
        frametag(&["run", "-", "--fail-on-violation"], &[], Some(trace))
            .status
            .code(),
        Some(1)
    );
    let via_env = frametag(
        &["run", "-"],
        &[("FRAMETAG_FAIL_ON_VIOLATION", "true")],
        Some(trace),
    );
    assert_eq!(via_env.status.code(), Some(1));
    let clean = frametag(
        &["run", "-", "--fail-on-violation"],
        &[],
        Some("alloc p 10\nstore p 6 4\n"),
    );
    assert_eq!(clean.status.code(), Some(0));
}

#[test]
fn env_sets_arena_size() {
    let out = frametag(
        &["run", "-", "--json"],
        &[("FRAMETAG_ARENA_SIZE", "1048576")],
        Some("alloc p 10\n"),
    );
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["arena_size"], 1 << 20);
}

#[test]
fn malformed_trace_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.trace");
    fs::write(&path, "alloc p 10\nstore q 0 1\n").unwrap();
    let out = frametag(&["run", path.to_str().unwrap()], &[], None);
    assert_eq!(out.status.code(), Some(64));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains("line 2"), "{stderr}");
}
