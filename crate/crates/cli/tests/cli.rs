//! End-to-end runs of the binary: exit codes, verdict JSON on stdout, and
//! byte-reproducible output directories.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn jsq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jsq"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout_criteria(out: &Output) -> Vec<serde_json::Value> {
    let text = String::from_utf8_lossy(&out.stdout);
    serde_json::from_str::<serde_json::Value>(&text)
        .unwrap_or_else(|e| panic!("stdout is not JSON ({e}): {text}"))
        .as_array()
        .unwrap()
        .clone()
}

#[test]
fn verify_passes_and_reports_json() {
    let out = jsq(&["verify", "--seed", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let criteria = stdout_criteria(&out);
    assert!(criteria.len() >= 8);
    for c in &criteria {
        assert_eq!(c["pass"], true, "{c}");
        assert!(c["criterion"].is_string());
        assert!(c["statistic"].is_number());
    }
}

#[test]
fn fixed_point_default_run_passes_and_tabulates() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("fp");
    let out = jsq(&["fixed-point", "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = fs::read_to_string(out_dir.join("fixed_point.csv")).unwrap();
    // rho = 0.5, L = 2: u~(1) = 0.5, u~(2) = 0.125
    assert!(table.contains("\n1,5.0000000000000000e-1\n"));
    assert!(table.contains("\n2,1.2500000000000000e-1\n"));
    assert!(out_dir.join("relaxation.csv").exists());
    assert!(out_dir.join("verdict.json").exists());
    assert!(out_dir.join("config.toml").exists());
    assert!(out_dir.join("run.log").exists());
}

#[test]
fn unstable_regime_is_diagnosed_with_failure_exit() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("unstable.toml");
    fs::write(&cfg, "alpha = 3.0\nbeta = 2.0\nt_end = 1.0\n").unwrap();
    let out = jsq(&["fixed-point", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("unstable"), "stderr: {stderr}");
    let criteria = stdout_criteria(&out);
    assert_eq!(criteria[0]["criterion"], "stable-regime");
    assert_eq!(criteria[0]["pass"], false);
}

#[test]
fn invalid_config_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "grid_dt = -0.5\n").unwrap();
    let out = jsq(&["lln", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("grid_dt"));

    let cfg2 = dir.path().join("bad2.toml");
    fs::write(&cfg2, "ns = [1, 50]\n").unwrap();
    let out = jsq(&["lln", "--config", cfg2.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    let out = jsq(&["no-such-subcommand"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn single_population_size_skips_the_rate_fit() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("one-n.toml");
    fs::write(&cfg, "ns = [60]\nt_end = 0.5\nk_max = 6\n").unwrap();
    let out = jsq(&[
        "lln",
        "--config",
        cfg.to_str().unwrap(),
        "--replicas",
        "8",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("rate fit skipped"));
    assert_eq!(stdout_criteria(&out).len(), 0);
}

// run.log holds the timestamps and the config copy holds the resolved
// output path, so neither can be byte-identical across directories
fn read_sorted_data_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap())
        .filter(|e| e.file_name() != "run.log" && e.file_name() != "config.toml")
        .map(|e| {
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

#[test]
fn lln_outputs_are_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("lln.toml");
    fs::write(
        &cfg,
        "ns = [50, 100, 200]\nt_end = 1.0\ngrid_dt = 0.25\nk_max = 6\nseed = 17\n",
    )
    .unwrap();
    let run = |tag: &str| {
        let out_dir = dir.path().join(tag);
        let out = jsq(&[
            "lln",
            "--config",
            cfg.to_str().unwrap(),
            "--replicas",
            "12",
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert!(
            matches!(out.status.code(), Some(0 | 1)),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        out_dir
    };
    let a = read_sorted_data_files(&run("a"));
    let b = read_sorted_data_files(&run("b"));
    assert_eq!(a.len(), b.len());
    assert!(a.iter().any(|(name, _)| name == "lln_medians.csv"));
    for ((name_a, bytes_a), (name_b, bytes_b)) in a.iter().zip(&b) {
        assert_eq!(name_a, name_b);
        assert_eq!(bytes_a, bytes_b, "{name_a} differs between identical runs");
    }
    // a different seed must actually change the data
    let out_dir = dir.path().join("c");
    let out = jsq(&[
        "lln",
        "--config",
        cfg.to_str().unwrap(),
        "--replicas",
        "12",
        "--seed",
        "18",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(matches!(out.status.code(), Some(0 | 1)));
    let c = read_sorted_data_files(&out_dir);
    let medians = |set: &[(String, Vec<u8>)]| {
        set.iter()
            .find(|(n, _)| n == "lln_medians.csv")
            .unwrap()
            .1
            .clone()
    };
    assert_ne!(medians(&a), medians(&c));
}

#[test]
fn clt_small_run_emits_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("clt.toml");
    fs::write(
        &cfg,
        "n = 200\nt_end = 1.0\ncoords = 2\nk_max = 8\nseed = 2\n",
    )
    .unwrap();
    let out_dir = dir.path().join("clt");
    let out = jsq(&[
        "clt",
        "--config",
        cfg.to_str().unwrap(),
        "--replicas",
        "80",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(
        matches!(out.status.code(), Some(0 | 1)),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("clt_summary.json")).unwrap())
            .unwrap();
    assert_eq!(summary["ks"].as_array().unwrap().len(), 2);
    assert!(summary["frobenius_rel_error"].is_number());
    let ensemble = fs::read_to_string(out_dir.join("clt_ensemble.csv")).unwrap();
    assert!(ensemble.contains("replica,c1,c2"));
    assert_eq!(ensemble.lines().filter(|l| !l.starts_with('#')).count(), 81);
}

#[test]
fn ou_small_run_exports_covariance_and_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("ou.toml");
    fs::write(&cfg, "t_end = 0.5\nou_dt = 0.002\ncoords = 2\nseed = 4\n").unwrap();
    let out_dir = dir.path().join("ou");
    let out = jsq(&[
        "ou",
        "--config",
        cfg.to_str().unwrap(),
        "--replicas",
        "2000",
        "--out",
        out_dir.to_str().unwrap(),
        "--threads",
        "2",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let cov = fs::read_to_string(out_dir.join("ou_covariance.csv")).unwrap();
    assert!(cov.lines().any(|l| l.starts_with("t,s_1_1")));
    let path = fs::read_to_string(out_dir.join("ou_path.csv")).unwrap();
    let data_rows = path.lines().filter(|l| !l.starts_with('#')).count();
    // header plus one state per EM step plus the initial state
    assert_eq!(data_rows, 252);
}
