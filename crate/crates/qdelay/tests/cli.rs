//! End-to-end tests of the `qdelay` binary: exit codes, file outputs, and
//! byte-level reproducibility, all through real process invocations.

use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn qdelay(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qdelay"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap_or_else(|e| panic!("read {name}: {e}"))
}

#[test]
fn help_exits_zero() {
    let tmp = TempDir::new().unwrap();
    let out = qdelay(tmp.path(), &["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    for cmd in ["certify", "sweep-delay", "simulate", "reduce", "verify-cert"] {
        assert!(text.contains(cmd), "help must list {cmd}");
    }
}

#[test]
fn unknown_argument_exits_one() {
    let tmp = TempDir::new().unwrap();
    let out = qdelay(tmp.path(), &["certify", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn certify_verify_round_trip() {
    let tmp = TempDir::new().unwrap();
    let out = qdelay(tmp.path(), &["certify", "--paper", "--out", "cert.txt"]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    assert!(tmp.path().join("cert.txt").exists());

    // The manifest echoes every resolved parameter of the run.
    let manifest = read(tmp.path(), "cert.manifest");
    assert!(manifest.starts_with("qdelay-manifest v1\n"));
    for needle in [
        "command=certify",
        "eta=9/10",
        "k1=1/1",
        "k2=4/1",
        "tau=3/10",
        "epsilon=1/1000000",
        "v0_degree=2",
    ] {
        assert!(manifest.contains(needle), "manifest missing {needle}:\n{manifest}");
    }

    let out = qdelay(tmp.path(), &["verify-cert", "--cert", "cert.txt"]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    assert!(stdout(&out).contains("verification passed"));
}

#[test]
fn certificate_is_reproducible_through_the_system_file() {
    let tmp = TempDir::new().unwrap();
    let out = qdelay(tmp.path(), &["reduce", "--paper", "--out", "system.txt"]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let fingerprint_line = stdout(&out);

    // Certifying the built-in preset and certifying its exported system
    // file must agree byte for byte: the file carries the exact rationals.
    let out = qdelay(tmp.path(), &["certify", "--paper", "--out", "a.txt"]);
    assert_eq!(out.status.code(), Some(0));
    let out = qdelay(
        tmp.path(),
        &["certify", "--system", "system.txt", "--out", "b.txt"],
    );
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    assert_eq!(read(tmp.path(), "a.txt"), read(tmp.path(), "b.txt"));

    // And the certificate embeds the same fingerprint reduce printed.
    let cert = read(tmp.path(), "a.txt");
    let embedded = cert
        .lines()
        .find_map(|l| l.strip_prefix("fingerprint "))
        .expect("certificate carries a fingerprint");
    assert!(
        fingerprint_line.contains(embedded),
        "reduce printed {fingerprint_line}, certificate has {embedded}"
    );

    // verify-cert accepts the matching system file…
    let out = qdelay(
        tmp.path(),
        &["verify-cert", "--cert", "a.txt", "--system", "system.txt"],
    );
    assert_eq!(out.status.code(), Some(0));

    // …and rejects one whose dynamics differ, without attempting algebra.
    let altered = read(tmp.path(), "system.txt").replace("tau 3/10", "tau 1/5");
    std::fs::write(tmp.path().join("other.txt"), altered).unwrap();
    let out = qdelay(
        tmp.path(),
        &["verify-cert", "--cert", "a.txt", "--system", "other.txt"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("fingerprints differ"));
}

#[test]
fn corrupted_certificate_fails_verification() {
    let tmp = TempDir::new().unwrap();
    let out = qdelay(tmp.path(), &["certify", "--paper", "--out", "cert.txt"]);
    assert_eq!(out.status.code(), Some(0));

    // Shift the first Gram cell after the matrix header by a full unit:
    // the SOS identity must stop holding and verification must say so
    // with exit 2. (A unit shift, not a last-digit bump — tiny rational
    // perturbations sit below the verifier's residual tolerance.)
    let text = read(tmp.path(), "cert.txt");
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    let gram = lines
        .iter()
        .position(|l| l.starts_with("gram "))
        .expect("certificate has a gram block");
    let cell = lines[gram + 1].clone();
    let mut parts: Vec<&str> = cell.split_whitespace().collect();
    let value = parts[2];
    let bumped = match value.split_once('/') {
        Some((p, q)) => {
            format!("{}/{q}", p.parse::<i128>().unwrap() + q.parse::<i128>().unwrap())
        }
        None => format!("{}", value.parse::<i128>().unwrap() + 1),
    };
    parts[2] = &bumped;
    lines[gram + 1] = parts.join(" ");
    std::fs::write(tmp.path().join("bad.txt"), lines.join("\n") + "\n").unwrap();

    let out = qdelay(tmp.path(), &["verify-cert", "--cert", "bad.txt"]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("verification failure"));
}

#[test]
fn malformed_system_file_reports_the_line() {
    let tmp = TempDir::new().unwrap();
    std::fs::write(
        tmp.path().join("bad.txt"),
        "qdelay-system v1\nn 2\ntau oops\n",
    )
    .unwrap();
    let out = qdelay(
        tmp.path(),
        &["certify", "--system", "bad.txt", "--out", "c.txt"],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("line 3"), "stderr: {}", stderr(&out));
    assert!(!tmp.path().join("c.txt").exists());
}

#[test]
fn ungained_system_exits_two_without_a_certificate() {
    let tmp = TempDir::new().unwrap();
    // Zero feedback leaves the drift with no stabilizing part, so the
    // search must come back empty — a negative answer, not an error.
    let out = qdelay(
        tmp.path(),
        &[
            "certify", "--spin", "2", "--k", "0", "0", "--eta", "9/10", "--tau", "3/10",
            "--out", "zg.txt",
        ],
    );
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(&out));
    assert!(!tmp.path().join("zg.txt").exists());
    // The manifest is still written: the run happened and is reproducible.
    assert!(tmp.path().join("zg.manifest").exists());
}

#[test]
fn sweep_probes_the_grid_and_reports_the_prefix() {
    let tmp = TempDir::new().unwrap();
    let out = qdelay(
        tmp.path(),
        &[
            "sweep-delay", "--paper", "--tau-max", "3/10", "--tol", "3/20",
            "--out", "sweep.csv",
        ],
    );
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    assert!(stdout(&out).contains("largest certified delay: 3/10"));
    let csv = read(tmp.path(), "sweep.csv");
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("tau,certified,message"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 3, "grid 0, 3/20, 3/10:\n{csv}");
    assert!(rows.iter().all(|r| r.contains(",true,")));
}

#[test]
fn simulate_is_byte_reproducible_per_seed() {
    let tmp = TempDir::new().unwrap();
    let args = |prefix: &str, seed: &str| {
        vec![
            "simulate".to_string(),
            "--paper".into(),
            "--paths".into(),
            "3".into(),
            "--horizon".into(),
            "0.5".into(),
            "--seed".into(),
            seed.into(),
            "--out-prefix".into(),
            prefix.into(),
        ]
    };
    for (prefix, seed) in [("a", "11"), ("b", "11"), ("c", "12")] {
        let argv: Vec<String> = args(prefix, seed);
        let argv: Vec<&str> = argv.iter().map(String::as_str).collect();
        let out = qdelay(tmp.path(), &argv);
        assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    }
    assert_eq!(read(tmp.path(), "a-paths.csv"), read(tmp.path(), "b-paths.csv"));
    assert_eq!(
        read(tmp.path(), "a-ensemble.csv"),
        read(tmp.path(), "b-ensemble.csv")
    );
    assert_ne!(read(tmp.path(), "a-paths.csv"), read(tmp.path(), "c-paths.csv"));

    // Worker count must not affect the bytes, only the wall clock.
    let argv: Vec<String> = args("d", "11");
    let argv: Vec<&str> = argv.iter().map(String::as_str).collect();
    let out = Command::new(env!("CARGO_BIN_EXE_qdelay"))
        .current_dir(tmp.path())
        .env("QDELAY_WORKERS", "2")
        .args(&argv)
        .output()
        .expect("binary runs");
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(read(tmp.path(), "a-paths.csv"), read(tmp.path(), "d-paths.csv"));
}

#[test]
fn suppressed_diffusion_decays_deterministically() {
    let tmp = TempDir::new().unwrap();
    let out = qdelay(
        tmp.path(),
        &[
            "simulate", "--paper", "--reduced", "--suppress-diffusion",
            "--paths", "2", "--horizon", "2", "--out-prefix", "det",
        ],
    );
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let csv = read(tmp.path(), "det-ensemble.csv");
    let rows: Vec<(f64, f64, f64)> = csv
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<f64> = l.split(',').map(|v| v.parse().unwrap()).collect();
            (f[0], f[1], f[2])
        })
        .collect();
    // No noise: zero spread across paths, and the distance must have
    // decayed from the far pole once feedback has had time to act.
    assert!(rows.iter().all(|(_, _, se)| *se == 0.0));
    let first = rows.first().unwrap();
    let last = rows.last().unwrap();
    assert_eq!(first.1, 1.0);
    assert!((last.0 - 2.0).abs() < 1e-9);
    assert!(last.1 < 0.65, "dist(2) = {}", last.1);

    // The noiseless run through the full filter agrees with nothing here —
    // suppression is a reduced-form-only concept and must be refused.
    let out = qdelay(
        tmp.path(),
        &["simulate", "--paper", "--suppress-diffusion", "--out-prefix", "x"],
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn filter_and_reduction_agree_pathwise_through_the_binary() {
    let tmp = TempDir::new().unwrap();
    for (prefix, extra) in [("full", None), ("red", Some("--reduced"))] {
        let mut argv = vec![
            "simulate", "--paper", "--paths", "1", "--horizon", "0.5",
            "--seed", "5", "--out-prefix", prefix,
        ];
        if let Some(flag) = extra {
            argv.push(flag);
        }
        let out = qdelay(tmp.path(), &argv);
        assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    }
    let dist = |name: &str| -> Vec<f64> {
        read(tmp.path(), name)
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
            .collect()
    };
    let full = dist("full-paths.csv");
    let red = dist("red-paths.csv");
    assert_eq!(full.len(), red.len());
    // Same driving noise on both sides; the two Euler schemes differ only
    // by O(dt) per unit time.
    let worst = full
        .iter()
        .zip(&red)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    assert!(worst < 1e-4, "worst pathwise gap {worst}");
}

#[test]
fn non_integral_grid_is_an_input_error() {
    let tmp = TempDir::new().unwrap();
    let out = qdelay(
        tmp.path(),
        &["simulate", "--paper", "--dt", "0.0007", "--horizon", "1", "--out-prefix", "g"],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("not an integer"), "stderr: {}", stderr(&out));
}

#[test]
fn reduce_output_round_trips() {
    let tmp = TempDir::new().unwrap();
    let out = qdelay(tmp.path(), &["reduce", "--paper", "--out", "system.txt"]);
    assert_eq!(out.status.code(), Some(0));
    let text = read(tmp.path(), "system.txt");
    assert!(text.starts_with("qdelay-system v1\n"));

    // The exported file is exact input for a simulation run.
    let out = qdelay(
        tmp.path(),
        &[
            "simulate", "--system", "system.txt", "--history", "1,0",
            "--paths", "1", "--horizon", "0.5", "--out-prefix", "fs",
        ],
    );
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let csv = read(tmp.path(), "fs-paths.csv");
    assert!(csv.starts_with("t,v_star,path_id\n"));
}

#[test]
fn simulate_requires_a_history_for_file_systems() {
    let tmp = TempDir::new().unwrap();
    let out = qdelay(tmp.path(), &["reduce", "--paper", "--out", "system.txt"]);
    assert_eq!(out.status.code(), Some(0));
    let out = qdelay(
        tmp.path(),
        &["simulate", "--system", "system.txt", "--out-prefix", "x"],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("--history"), "stderr: {}", stderr(&out));
}
