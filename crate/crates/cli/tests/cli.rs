use std::path::Path;
use std::process::{Command, Output};

fn wes(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wes"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn synth(dir: &Path) {
    let o = wes(&["synth", "--out", dir.to_str().unwrap(), "--seed", "3", "--count", "8"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

fn path(dir: &Path, rel: &str) -> String {
    dir.join(rel).to_str().unwrap().to_owned()
}

#[test]
fn quantize_simulate_and_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    for scheme in ["lwq", "cwq", "wes"] {
        let q = path(d, &format!("{scheme}.bin"));
        let o = wes(&[
            "quantize", "--model", &path(d, "model"), "--rep-data", &path(d, "rep"),
            "--out", &q, "--scheme", scheme,
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("layer")).count(), 6);
        if scheme == "wes" {
            assert!(stdout(&o).contains("r_hat"));
            assert!(stdout(&o).contains("shifts"));
        }

        let out = path(d, &format!("{scheme}.out"));
        let o = wes(&[
            "simulate", "--model", &q, "--input", &path(d, "rep/x0.bin"), "--out", &out,
            "--check", "--strict",
        ]);
        assert!(o.status.success(), "{}", stdout(&o));
        assert_eq!(std::fs::read(&out).unwrap().len(), 10);

        let o = wes(&["report", "--model", &q]);
        assert!(o.status.success());
        assert!(stdout(&o).contains(scheme));
    }
}

#[test]
fn simulation_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    let q = path(d, "q.bin");
    let args = ["quantize", "--model", &path(d, "model"), "--rep-data", &path(d, "rep"), "--out", &q,
        "--prune-threshold", "0.05", "--clip"];
    assert!(wes(&args).status.success());
    let first = std::fs::read(&q).unwrap();
    assert!(wes(&args).status.success());
    assert_eq!(std::fs::read(&q).unwrap(), first);

    let run = |out: &str| {
        let o = wes(&["simulate", "--model", &q, "--rep-data", &path(d, "rep"), "--out", out]);
        assert!(o.status.success());
        std::fs::read(out).unwrap()
    };
    assert_eq!(run(&path(d, "a.out")), run(&path(d, "b.out")));
}

#[test]
fn float_report_compares_schemes() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let o = wes(&["report", "--model", &path(dir.path(), "model"), "--compare"]);
    assert!(o.status.success());
    let s = stdout(&o);
    assert!(s.contains("overlap after WES"));
    assert!(s.contains("total cwq"));
}

#[test]
fn geometry_report_reproduces_depthwise_overhead() {
    let o = wes(&["report", "--geometry", "dw3x3", "--channels", "1024"]);
    assert!(o.status.success());
    let row = stdout(&o).lines().last().unwrap().to_owned();
    let cols: Vec<&str> = row.split_whitespace().collect();
    assert_eq!(cols[0], "1024");
    assert_eq!(cols[4], "63.787");
    assert_eq!(cols[5], "5.552");
}

#[test]
fn missing_rep_data_fails() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    let o = wes(&[
        "quantize", "--model", &path(d, "model"), "--rep-data", &path(d, "nowhere"),
        "--out", &path(d, "q.bin"),
    ]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("representative data"));
}

#[test]
fn corrupt_quantized_model_fails() {
    let dir = tempfile::tempdir().unwrap();
    let q = path(dir.path(), "bad.bin");
    std::fs::write(&q, b"WESQ\x01\x00garbage").unwrap();
    let input = path(dir.path(), "x.bin");
    std::fs::write(&input, [0u8; 4]).unwrap();
    let o = wes(&["simulate", "--model", &q, "--input", &input]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn bad_arguments_are_rejected() {
    assert!(!wes(&["quantize", "--scheme", "fancy"]).status.success());
    assert!(!wes(&["simulate", "--model", "q.bin", "--strict"]).status.success());
}
