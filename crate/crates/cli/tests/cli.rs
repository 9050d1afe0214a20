//! End-to-end checks of the `p2m` binary, including its failure modes.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use p2m_core::aer;
use p2m_core::events::{parse_event_stream, EventFormat};

fn p2m(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_p2m"))
        .args(args)
        .output()
        .expect("spawn p2m")
}

fn configs(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
        .display()
        .to_string()
}

fn path(dir: &Path, name: &str) -> (PathBuf, String) {
    let p = dir.join(name);
    let s = p.display().to_string();
    (p, s)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn synth_zero_rate_writes_valid_empty_stream() {
    let dir = tempfile::tempdir().unwrap();
    let (p, s) = path(dir.path(), "empty.csv");
    let o = p2m(&["synth", "--width", "10", "--height", "6", "--rate", "0", "--out", &s]);
    assert!(o.status.success(), "{}", stderr(&o));
    let stream = parse_event_stream(&fs::read(p).unwrap(), EventFormat::Csv).unwrap();
    assert!(stream.is_empty());
    assert_eq!((stream.width, stream.height), (10, 6));
}

#[test]
fn synth_without_out_fails() {
    let o = p2m(&["synth", "--rate", "1"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("--out"));
}

#[test]
fn synth_binary_and_csv_hold_the_same_events() {
    let dir = tempfile::tempdir().unwrap();
    let (pb, sb) = path(dir.path(), "s.bin");
    let (pc, sc) = path(dir.path(), "s.csv");
    for out in [&sb, &sc] {
        let o = p2m(&[
            "synth",
            "--width",
            "20",
            "--height",
            "20",
            "--duration-us",
            "2000",
            "--rate",
            "1",
            "--seed",
            "5",
            "--out",
            out,
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let b = parse_event_stream(&fs::read(pb).unwrap(), EventFormat::Binary).unwrap();
    let c = parse_event_stream(&fs::read(pc).unwrap(), EventFormat::Csv).unwrap();
    assert_eq!(b, c);
    assert!(!b.is_empty());
}

#[test]
fn calibrate_rejects_degenerate_grid() {
    let dir = tempfile::tempdir().unwrap();
    let (_, s) = path(dir.path(), "m.cfg");
    let o = p2m(&[
        "calibrate",
        "--weight-steps",
        "1",
        "--max-count",
        "1",
        "--trials",
        "5",
        "--out",
        &s,
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("degenerate"), "{}", stderr(&o));
}

#[test]
fn calibrate_reports_fit_quality() {
    let dir = tempfile::tempdir().unwrap();
    let (p, s) = path(dir.path(), "m.cfg");
    let o = p2m(&[
        "calibrate",
        "--config",
        &configs("device.cfg"),
        "--trials",
        "20",
        "--out",
        &s,
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("grid_points = 615"), "{text}");
    let rmse: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("fit_rmse = "))
        .unwrap()
        .parse()
        .unwrap();
    assert!(rmse <= 0.01);
    assert!(p.is_file());
}

#[test]
fn simulate_empty_stream_gives_silent_output() {
    let dir = tempfile::tempdir().unwrap();
    let (_, stream) = path(dir.path(), "empty.bin");
    let (out, outs) = path(dir.path(), "sim");
    let o = p2m(&[
        "synth",
        "--width",
        "34",
        "--height",
        "34",
        "--duration-us",
        "3000",
        "--rate",
        "0",
        "--out",
        &stream,
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = p2m(&[
        "simulate",
        "--config",
        &configs("nmnist.run"),
        "--stream",
        &stream,
        "--out",
        &outs,
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (g, windows) = aer::read_dump(&fs::read(out.join("aer.bin")).unwrap()).unwrap();
    assert_eq!((g.out_width, g.out_height, g.channels), (16, 16, 8));
    assert_eq!(windows.len(), 3);
    assert!(windows.iter().all(Vec::is_empty));
    let acts = fs::read_to_string(out.join("activations.txt")).unwrap();
    assert_eq!(acts.lines().filter(|l| !l.starts_with('#')).count(), 0);
    assert!(fs::read_to_string(out.join("stats.txt"))
        .unwrap()
        .contains("output_spikes = 0"));
}

#[test]
fn simulate_missing_stream_fails() {
    let dir = tempfile::tempdir().unwrap();
    let (_, outs) = path(dir.path(), "sim");
    let o = p2m(&[
        "simulate",
        "--config",
        &configs("nmnist.run"),
        "--stream",
        "/nonexistent.bin",
        "--out",
        &outs,
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("does not exist"));
}

#[test]
fn simulate_then_trace_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let (_, stream) = path(dir.path(), "s.bin");
    let (out, outs) = path(dir.path(), "sim");
    let (tp, ts) = path(dir.path(), "trace.txt");
    assert!(p2m(&[
        "synth",
        "--width",
        "34",
        "--height",
        "34",
        "--duration-us",
        "2000",
        "--rate",
        "3",
        "--out",
        &stream
    ])
    .status
    .success());
    let o = p2m(&[
        "simulate",
        "--config",
        &configs("nmnist.run"),
        "--stream",
        &stream,
        "--out",
        &outs,
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let dump = out.join("aer.bin").display().to_string();
    let o = p2m(&["aer-trace", "--dump", &dump, "--out", &ts]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("replay = ok"));
    let trace = fs::read_to_string(tp).unwrap();
    let headers = trace.lines().filter(|l| l.starts_with("# window")).count();
    assert_eq!(headers, 2);
    let o = p2m(&["aer-trace", "--dump", &dump, "--window", "7"]);
    assert!(!o.status.success());
}

#[test]
fn energy_requires_config() {
    let o = p2m(&["energy"]);
    assert!(!o.status.success());
    let o = p2m(&["energy", "--config", "/nonexistent/constants.cfg"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("nonexistent"));
}

#[test]
fn energy_prints_sensing_energies() {
    let o = p2m(&["energy", "--config", &configs("gesture.network")]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("baseline 26.032, p2m 26.588"), "{text}");
    assert!(text.contains("e_mac/e_ac                     52.27"), "{text}");
}

#[test]
fn verify_zero_seeds_passes_and_skew_fails() {
    let o = p2m(&["verify", "--seeds", "0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("result = pass"));
    let o = p2m(&["verify", "--seeds", "50", "--v-th-skew", "0.01"]);
    assert_eq!(o.status.code(), Some(1));
    let text = stdout(&o);
    assert!(
        text.contains("result = fail") && text.contains("counterexample = seed"),
        "{text}"
    );
}
