use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn moranlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moranlab"))
        .args(args)
        .env_remove("MORANLAB_OUT")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const MINIMAL: &str = "payoff = [[1.0, 2.0], [3.0, 4.0]]\n\n[simulate]\nk = 10\npopulation = 8\nselection_weight = 0.5\n";

const SMALL_RUN: &str = "payoff = [[1.0, 2.0], [3.0, 4.0]]\nks = [16, 32]\nensemble_size = 16\ncheckpoints = [0.5, 1.0]\nbootstrap_resamples = 20\nrandom_witnesses = 2\n";

#[test]
fn simulate_minimal_writes_one_row_per_grid_point() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "min.toml", MINIMAL);
    let out = dir.path().join("out");
    let o = moranlab(&["simulate", "-c", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("trajectory.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("t,lambda_1,lambda_2"));
    assert_eq!(lines.count(), 11);
    assert!(out.join("trajectory.json").exists());
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 1);
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 2);
}

#[test]
fn same_seed_gives_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.toml", "payoff = [[0.0, 2.0, 1.0], [1.0, 0.0, 2.0], [2.0, 1.0, 0.0]]\n[law]\nkind = \"uniform_simplex\"\ndim = 3\n[simulate]\nk = 300\n");
    let mut runs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let o = moranlab(&["simulate", "-c", &cfg, "--seed", "42", "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
        runs.push((fs::read(out.join("trajectory.csv")).unwrap(), fs::read(out.join("trajectory.json")).unwrap()));
    }
    assert_eq!(runs[0], runs[1]);
    let other = dir.path().join("c");
    moranlab(&["simulate", "-c", &cfg, "--seed", "43", "--out", other.to_str().unwrap()]);
    assert_ne!(fs::read(other.join("trajectory.csv")).unwrap(), runs[0].0);
}

#[test]
fn absorbing_initial_state_gives_constant_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "abs.toml", &format!("{MINIMAL}initial = [0.0, 1.0]\n"));
    let out = dir.path().join("out");
    let o = moranlab(&["simulate", "-c", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("trajectory.csv")).unwrap();
    let values: Vec<&str> = csv.lines().skip(1).map(|l| l.split_once(',').unwrap().1).collect();
    assert_eq!(values.len(), 11);
    assert!(values.iter().all(|v| *v == values[0]));
    assert_eq!(values[0], "0.0000000000000000e0,1.0000000000000000e0");
}

#[test]
fn negative_payoff_is_a_config_error_naming_the_entry() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", "seed = 1\npayoff = [[1.0, -0.5], [3.0, 4.0]]\n");
    for cmd in ["validate", "simulate", "converge"] {
        let o = moranlab(&[cmd, "-c", &cfg]);
        assert_eq!(o.status.code(), Some(2), "{cmd}");
        let err = stderr(&o);
        assert!(err.contains("[0][1]"), "{err}");
        assert!(err.contains("bad.toml:2:"), "{err}");
    }
}

#[test]
fn malformed_config_reports_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "p.toml", "seed = 1\nks = [64,\n");
    let o = moranlab(&["converge", "--dry-run", "-c", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("p.toml:"), "{}", stderr(&o));
    let cfg = write_config(dir.path(), "q.toml", "seed = 1\n\nbogus = 3\n");
    let o = moranlab(&["converge", "--dry-run", "-c", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("q.toml:3:"), "{}", stderr(&o));
}

#[test]
fn validate_passes_for_two_seeds() {
    for seed in ["0", "1"] {
        let o = moranlab(&["validate", "--seed", seed]);
        assert!(o.status.success(), "seed {seed}: {}{}", stdout(&o), stderr(&o));
        let text = stdout(&o);
        assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 4, "{text}");
        assert!(!text.contains("FAIL"));
    }
}

#[test]
fn dry_run_prints_schedule_without_writing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = moranlab(&["converge", "--dry-run", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].contains("tau_k") && lines[0].contains("N_k") && lines[0].contains("w_k"));
    assert_eq!(lines.len(), 5);
    let first: Vec<&str> = lines[1].split_whitespace().collect();
    assert_eq!(first[0], "64");
    assert_eq!(first[2], "12");
    assert!(!out.exists());
}

#[test]
fn converge_guards_its_exponents() {
    let o = moranlab(&["converge", "--alpha", "1.0", "--beta", "0.5"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stdout(&o).starts_with("FAIL"));
    assert!(stderr(&o).contains("--regime"), "{}", stderr(&o));
    let o = moranlab(&["converge", "--alpha", "0.5", "--beta", "0.5"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("1/2"), "{}", stderr(&o));
    let o = moranlab(&["converge", "--alpha", "1.0", "--beta", "0.5", "--regime", "--dry-run"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn converge_writes_reports_independent_of_threads() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.toml", SMALL_RUN);
    let before = fs::read(&cfg).unwrap();
    let mut reports = Vec::new();
    for threads in ["1", "3"] {
        let out = dir.path().join(format!("t{threads}"));
        let o = moranlab(&["converge", "-c", &cfg, "--threads", threads, "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
        let verdict = stdout(&o);
        assert_eq!(verdict.lines().count(), 1);
        assert!(verdict.starts_with("PASS") || verdict.starts_with("FAIL"));
        let csv = fs::read_to_string(out.join("report.csv")).unwrap();
        assert!(csv.starts_with("k,t,w1,ci,w1_bar_gap,n_k,w_k,tau_k\n"));
        assert_eq!(csv.lines().count(), 1 + 2 * 2);
        reports.push((fs::read(out.join("report.json")).unwrap(), csv));
    }
    assert_eq!(reports[0], reports[1]);
    assert_eq!(fs::read(&cfg).unwrap(), before);
}

#[test]
fn regimes_and_residual_write_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.toml", SMALL_RUN);
    let out = dir.path().join("r");
    let o = moranlab(&["regimes", "-c", &cfg, "--alpha", "1.0", "--beta", "0.5", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("Frozen"));
    assert_eq!(fs::read_to_string(out.join("regimes.csv")).unwrap().lines().count(), 3);
    let out = dir.path().join("w");
    let o = moranlab(&["residual", "-c", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(out.join("residual.csv")).unwrap().lines().count(), 1 + 2 * 3);
    let o = moranlab(&["residual", "-c", &cfg, "--ks", "8", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn output_directory_comes_from_environment_when_unset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "min.toml", MINIMAL);
    let env_out = dir.path().join("env");
    let o = Command::new(env!("CARGO_BIN_EXE_moranlab"))
        .args(["simulate", "-c", &cfg])
        .env("MORANLAB_OUT", &env_out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(env_out.join("trajectory.csv").exists());
    let flag_out = dir.path().join("flag");
    let o = Command::new(env!("CARGO_BIN_EXE_moranlab"))
        .args(["simulate", "-c", &cfg, "--out", flag_out.to_str().unwrap()])
        .env("MORANLAB_OUT", &env_out)
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(flag_out.join("trajectory.csv").exists());
}
