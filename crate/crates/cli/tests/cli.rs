use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_vcclt");

const MP_CONFIG: &str = r#"{
  "model": {
    "n": 40,
    "N": 40,
    "spectra": [{"kind": "scaled-identity", "tau_e": 1.0}],
    "scalings": [{"constant": 1.0}]
  },
  "points": [[0.0, 1.0]]
}"#;

fn run(dir: &Path, config: &str, args: &[&str]) -> Output {
    let path = dir.join("config.json");
    std::fs::write(&path, config).unwrap();
    Command::new(BIN)
        .arg("--config")
        .arg(&path)
        .args(args)
        .current_dir(dir)
        .env("VCCLT_THREADS", "1")
        .output()
        .unwrap()
}

/// Data rows of a CSV written with a provenance comment block.
fn rows(path: &Path) -> Vec<Vec<String>> {
    let text = std::fs::read_to_string(path).unwrap();
    let body: String = text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| format!("{l}\n"))
        .collect();
    let mut reader = csv::Reader::from_reader(body.as_bytes());
    reader
        .records()
        .map(|r| r.unwrap().iter().map(String::from).collect())
        .collect()
}

#[test]
fn solve_matches_closed_form_at_i() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), MP_CONFIG, &["solve", "--out", "o"]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let r = &rows(&dir.path().join("o/solve.csv"))[0];
    let (m_re, m_im): (f64, f64) = (r[2].parse().unwrap(), r[3].parse().unwrap());
    // With ratio one the transform is the root of z m² + z m + 1 = 0 in the
    // upper half plane.
    let m = (m_re, m_im);
    let z = (0.0, 1.0);
    let mul = |a: (f64, f64), b: (f64, f64)| (a.0 * b.0 - a.1 * b.1, a.0 * b.1 + a.1 * b.0);
    let zm = mul(z, m);
    let res = mul(zm, m);
    let total = (res.0 + zm.0 + 1.0, res.1 + zm.1);
    assert!(total.0.abs() < 1e-10 && total.1.abs() < 1e-10, "{total:?}");
    assert!(m_im > 0.0);
    assert_eq!(r[6], "true");
    let header = std::fs::read_to_string(dir.path().join("o/solve.csv")).unwrap();
    assert!(
        header.starts_with("# vcclt ")
            && header.contains("# config_hash: ")
            && header.contains("# seed: ")
    );
    assert!(dir.path().join("o/resolved_config.json").exists());
}

#[test]
fn malformed_config_exits_one_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), "{\n  \"model\": {\"n\": 4,}\n}", &["solve"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 2"), "{err}");
}

#[test]
fn real_axis_point_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        dir.path(),
        MP_CONFIG,
        &["solve", "--z", "1,0", "--z", "1,1", "--out", "o"],
    );
    assert_eq!(out.status.code(), Some(2));
    let r = rows(&dir.path().join("o/solve.csv"));
    assert_eq!(r[0][6], "false");
    assert_eq!(r[1][6], "true");
}

#[test]
fn under_resolved_contour_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), MP_CONFIG, &["clt", "--nodes", "8"]);
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn zero_covariance_gives_zero_summary() {
    let dir = tempfile::tempdir().unwrap();
    let config = r#"{
      "model": {"n": 6, "N": 8, "spectra": [{"kind": "eigenvalue-list", "values": [0, 0, 0, 0, 0, 0]}], "scalings": [{"constant": 1.0}]}
    }"#;
    let out = run(dir.path(), config, &["clt", "--out", "o"]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for row in rows(&dir.path().join("o/gamma.csv")) {
        assert_eq!(row[2].parse::<f64>().unwrap(), 0.0);
    }
    for row in rows(&dir.path().join("o/lambda.csv")) {
        assert!(
            row[1..].iter().all(|v| v.parse::<f64>().unwrap() == 0.0),
            "{row:?}"
        );
    }
}

const SMALL_TABLE1: &str = r#"{"table1": {"F": 30, "p": 30, "replicates": 12}}"#;

#[test]
fn stored_summaries_reproduce_the_fused_run() {
    let dir = tempfile::tempdir().unwrap();
    let fused = run(dir.path(), SMALL_TABLE1, &["table1", "--out", "fused"]);
    assert_eq!(
        fused.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&fused.stderr)
    );
    assert_eq!(
        run(dir.path(), SMALL_TABLE1, &["clt", "--out", "split"])
            .status
            .code(),
        Some(0)
    );
    let split = run(
        dir.path(),
        SMALL_TABLE1,
        &[
            "table1",
            "--out",
            "split",
            "--clt-summary",
            "split/table1_summaries.json",
        ],
    );
    assert_eq!(
        split.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&split.stderr)
    );
    for f in [
        "table1.csv",
        "table1.txt",
        "table1_replicates.csv",
        "table1_report.json",
    ] {
        let a = std::fs::read(dir.path().join("fused").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("split").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
    let mismatched = run(
        dir.path(),
        SMALL_TABLE1,
        &[
            "table1",
            "--families",
            "31",
            "--out",
            "x",
            "--clt-summary",
            "split/table1_summaries.json",
        ],
    );
    assert_eq!(mismatched.status.code(), Some(1));
}

#[test]
fn outputs_regenerate_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        let o = run(
            dir.path(),
            MP_CONFIG,
            &[
                "simulate",
                "--replicates",
                "25",
                "--seed",
                "4",
                "--svg",
                "--out",
                out,
            ],
        );
        assert_eq!(
            o.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
    for f in [
        "simulate.csv",
        "simulate_summary.json",
        "simulate_hist_1.svg",
    ] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
    let hash = |d: &str| {
        let text =
            std::fs::read_to_string(dir.path().join(d).join("resolved_config.json")).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["provenance"]["config_hash"].as_str().unwrap().to_string()
    };
    assert_eq!(hash("a"), hash("b"));
    let text = std::fs::read_to_string(dir.path().join("a/simulate.csv")).unwrap();
    assert!(text.contains("# seed: 4"));
}

#[test]
fn output_directory_is_created_or_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let ok = run(
        dir.path(),
        SMALL_TABLE1,
        &["table1", "--replicates", "2", "--out", "deep/nested/out"],
    );
    assert_eq!(
        ok.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&ok.stderr)
    );
    assert!(dir.path().join("deep/nested/out/table1.csv").exists());
    std::fs::write(dir.path().join("blocker"), "").unwrap();
    let bad = run(
        dir.path(),
        SMALL_TABLE1,
        &["table1", "--out", "blocker/out"],
    );
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn density_integrates_to_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        dir.path(),
        MP_CONFIG,
        &["density", "--points", "120", "--out", "o"],
    );
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let r = rows(&dir.path().join("o/density.csv"));
    assert_eq!(r.len(), 120);
    assert_eq!(r.last().unwrap()[2].parse::<f64>().unwrap(), 1.0);
    assert!(r.iter().all(|row| row[1].parse::<f64>().unwrap() >= 0.0));
}
