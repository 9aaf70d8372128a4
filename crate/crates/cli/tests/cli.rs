use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &str = "\
; coarse Burgers run for tests
[problem]
n_cells = 96
nu = 0.01

[pod]
r_max = 16

[rom]
r = 2, 4

[regime]
kind = predictive
t_split = 0.6
t_end = 0.8
";

fn vmsrom(args: &[&str], cache: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_vmsrom"));
    cmd.args(args);
    match cache {
        Some(dir) => cmd.env("ROM_CACHE_DIR", dir),
        None => cmd.env_remove("ROM_CACHE_DIR"),
    };
    cmd.output().expect("spawn vmsrom")
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn run_ok(args: &[&str], cache: Option<&Path>) -> String {
    let out = vmsrom(args, cache);
    let stderr = String::from_utf8_lossy(&out.stderr).into_owned();
    assert!(out.status.success(), "vmsrom {args:?} failed:\n{stderr}");
    stderr
}

fn table_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn pipeline_writes_table_and_reruns_from_cache() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "small.ini", SMALL);
    let out = tmp.path().join("out");
    let args = ["pipeline", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];

    let first_log = run_ok(&args, None);
    assert!(!first_log.contains("cached"), "{first_log}");
    let table = fs::read(out.join("table.csv")).unwrap();
    let metrics = fs::read(out.join("metrics.csv")).unwrap();

    let rows = table_rows(&out.join("table.csv"));
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0][0], "r");
    assert_eq!(rows[0][13], "config_hash");
    assert_eq!(rows[1][0], "2");
    assert_eq!(rows[2][0], "4");
    for row in &rows[1..] {
        assert_eq!(row.len(), rows[0].len());
        let grom: f64 = row[1].parse().unwrap();
        let two: f64 = row[4].parse().unwrap();
        let three: f64 = row[10].parse().unwrap();
        assert!(two < grom && three <= two, "{row:?}");
        // 17 significant digits.
        assert_eq!(row[1].split('e').next().unwrap().len(), 18, "{}", row[1]);
        for hash in &row[13..] {
            assert_eq!(hash.len(), 64);
        }
    }

    let second_log = run_ok(&args, None);
    assert_eq!(second_log.matches("cached").count(), 6, "{second_log}");
    assert_eq!(fs::read(out.join("table.csv")).unwrap(), table);
    assert_eq!(fs::read(out.join("metrics.csv")).unwrap(), metrics);

    let mut forced = args.to_vec();
    forced.push("--force");
    let forced_log = run_ok(&forced, None);
    assert!(!forced_log.contains("cached"), "{forced_log}");
    assert_eq!(fs::read(out.join("table.csv")).unwrap(), table);
    assert_eq!(fs::read(out.join("metrics.csv")).unwrap(), metrics);
    assert!(out.join(".cache").join("sweep").is_dir());
}

#[test]
fn integrated_errors_match_the_selected_sweep_entries() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "small.ini", SMALL);
    let out = tmp.path().join("out");
    run_ok(&["report", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--jobs", "2"], None);
    let table = table_rows(&out.join("table.csv"));
    let metrics = table_rows(&out.join("metrics.csv"));
    for row in &table[1..] {
        let pick = |model: &str| {
            metrics
                .iter()
                .find(|m| m[0] == row[0] && m[1] == model)
                .map(|m| m[2].clone())
                .unwrap()
        };
        assert_eq!(pick("grom"), row[1]);
        assert_eq!(pick("2s"), row[4]);
        assert_eq!(pick("3s"), row[10]);
    }
}

#[test]
fn changing_a_rom_setting_keeps_upstream_stages() {
    let tmp = TempDir::new().unwrap();
    let cache = tmp.path().join("cache");
    let a = write_config(tmp.path(), "a.ini", SMALL);
    let b = write_config(tmp.path(), "b.ini", &SMALL.replace("r = 2, 4\n", "r = 2, 4\ntarget = full-rhs\n"));
    let out = tmp.path().join("out");
    run_ok(&["pipeline", "--config", a.to_str().unwrap(), "--out", out.to_str().unwrap()], Some(&cache));
    let log = run_ok(&["pipeline", "--config", b.to_str().unwrap(), "--out", out.to_str().unwrap()], Some(&cache));
    for stage in ["fom", "pod", "operators"] {
        assert!(log.contains(&format!("[{stage}] cached")), "{log}");
    }
    for stage in ["train", "sweep", "integrate"] {
        assert!(log.contains(&format!("[{stage}] computed")), "{log}");
    }
    assert!(!out.join(".cache").exists(), "ROM_CACHE_DIR ignored");
}

#[test]
fn stage_flag_stops_early() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "small.ini", SMALL);
    let out = tmp.path().join("out");
    run_ok(
        &["pipeline", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--stage", "pod"],
        None,
    );
    assert!(out.join("eigenvalues.csv").is_file());
    assert!(!out.join("table.csv").exists());
    assert!(!out.join(".cache").join("operators").exists());

    run_ok(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()], None);
    assert!(out.join("spectrum_r4.csv").is_file());
    assert!(!out.join("sweep_2s_r4.csv").exists());
}

#[test]
fn r_above_r_max_is_rejected_naming_the_field() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "bad.ini", &SMALL.replace("r = 2, 4", "r = 2, 40"));
    let out = vmsrom(&["pipeline", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()], None);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("rom.r") && stderr.contains("pod.r_max"), "{stderr}");
}

#[test]
fn stage_failures_name_the_stage() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "centered.ini",
        &SMALL.replace("r_max = 16", "r_max = 16\ncenter = true"),
    );
    let out = vmsrom(&["pipeline", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()], None);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("stage operators failed"), "{stderr}");
}

#[test]
fn external_snapshots_reproduce_the_burgers_table() {
    let tmp = TempDir::new().unwrap();
    let cache = tmp.path().join("cache");
    let cfg = write_config(tmp.path(), "small.ini", SMALL);
    let out_a = tmp.path().join("a");
    run_ok(&["pipeline", "--config", cfg.to_str().unwrap(), "--out", out_a.to_str().unwrap()], Some(&cache));

    let fom_dir = fs::read_dir(cache.join("fom")).unwrap().next().unwrap().unwrap().path();
    fs::copy(fom_dir.join("snapshots.bin"), tmp.path().join("snaps.bin")).unwrap();
    let external = SMALL.replace("n_cells = 96\n", "kind = snapshots\npath = snaps.bin\n");
    let cfg_b = write_config(tmp.path(), "external.ini", &external);
    let out_b = tmp.path().join("b");
    run_ok(&["pipeline", "--config", cfg_b.to_str().unwrap(), "--out", out_b.to_str().unwrap()], Some(&cache));

    let a = table_rows(&out_a.join("table.csv"));
    let b = table_rows(&out_b.join("table.csv"));
    assert_eq!(a.len(), b.len());
    for (ra, rb) in a.iter().zip(&b) {
        assert_eq!(ra[..13], rb[..13]);
    }
    assert_ne!(a[1][13], b[1][13], "config hashes should differ");
}
