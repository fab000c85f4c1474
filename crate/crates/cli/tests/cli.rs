use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn otpf(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_otpf"))
        .args(args)
        .current_dir(cwd)
        .env_remove("OTPF_THREADS")
        .output()
        .expect("failed to launch otpf")
}

fn write_worked_example(dir: &Path) {
    fs::write(dir.join("cost.csv"), "0,1\n1,0\n").unwrap();
    fs::write(dir.join("row.csv"), "0.75\n0.25\n").unwrap();
    fs::write(dir.join("col.csv"), "0.5,0.5\n").unwrap();
}

fn read(path: impl AsRef<Path>) -> String {
    fs::read_to_string(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

#[test]
fn no_arguments_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = otpf(&[], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = otpf(&["scalar-uniform", "--frobnicate"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn transport_solve_worked_example() {
    let tmp = tempfile::tempdir().unwrap();
    write_worked_example(tmp.path());
    let out = otpf(
        &[
            "transport-solve",
            "--cost",
            "cost.csv",
            "--row",
            "row.csv",
            "--col",
            "col.csv",
            "--out-dir",
            "o",
        ],
        tmp.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("objective,0.25 "));
    let coupling = read(tmp.path().join("o/coupling.csv"));
    assert_eq!(
        coupling,
        "i,j,t\n0,0,0.5\n0,1,0.25\n1,1,0.25\n# objective,0.25\n"
    );
    assert!(tmp.path().join("o/config.toml").exists());
}

#[test]
fn transport_solve_reports_infeasible_marginals() {
    let tmp = tempfile::tempdir().unwrap();
    write_worked_example(tmp.path());
    fs::write(tmp.path().join("row.csv"), "0.7\n0.25\n").unwrap();
    let out = otpf(
        &[
            "transport-solve",
            "--cost",
            "cost.csv",
            "--row",
            "row.csv",
            "--col",
            "col.csv",
        ],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("infeasible"));
}

#[test]
fn transport_solve_without_inputs_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = otpf(&["transport-solve", "--cost", "cost.csv"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn scalar_uniform_matches_reference_row() {
    let tmp = tempfile::tempdir().unwrap();
    let out = otpf(
        &["scalar-uniform", "--M", "100", "--out-dir", "u"],
        tmp.path(),
    );
    assert!(out.status.success());
    let table = read(tmp.path().join("u/table2.csv"));
    let mut lines = table.lines();
    assert_eq!(
        lines.next(),
        Some("M,mean,variance,E[(X-mean)^3],E[(X-mean)^4]")
    );
    let row: Vec<f64> = lines
        .next()
        .unwrap()
        .split(',')
        .map(|f| f.parse().unwrap())
        .collect();
    let expected = [100.0, 0.4836, 0.0825, 0.0016, 0.0122];
    for (got, want) in row.iter().zip(expected) {
        assert!((got - want).abs() <= 5e-4, "{got} vs {want}");
    }
}

#[test]
fn scalar_gaussian_writes_all_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = otpf(&["scalar-gaussian", "--out-dir", "g"], tmp.path());
    assert!(out.status.success());
    let dir = tmp.path().join("g");
    assert_eq!(read(dir.join("table1.csv")).lines().count(), 4);
    assert_eq!(read(dir.join("fig1b_map.csv")).lines().count(), 11);
    assert_eq!(read(dir.join("fig2_support.csv")).lines().count(), 80);
}

#[test]
fn config_with_unknown_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("c.toml"), "sizes = [10]\nextra = true\n").unwrap();
    let out = otpf(&["scalar-uniform", "--config", "c.toml"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown field"));
}

#[test]
fn flags_override_config_values() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("c.toml"), "sizes = [10, 40]\n").unwrap();
    let out = otpf(
        &["scalar-uniform", "--config", "c.toml", "--M", "20"],
        tmp.path(),
    );
    assert!(out.status.success());
    assert_eq!(read(tmp.path().join("config.toml")), "sizes = [20]\n");
    assert!(read(tmp.path().join("table2.csv")).contains("\n20,"));
}

#[test]
fn sweep_is_deterministic_and_echo_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let args = [
        "lorenz-sweep",
        "--M",
        "10",
        "--steps",
        "15",
        "--inflation-grid",
        "1.0,1.05",
        "--seed",
        "7",
    ];
    let a = otpf(&[&args[..], &["--out-dir", "a"]].concat(), tmp.path());
    let b = otpf(&[&args[..], &["--out-dir", "b"]].concat(), tmp.path());
    assert!(a.status.success() && b.status.success());
    let c = otpf(
        &[
            "lorenz-sweep",
            "--config",
            "a/config.toml",
            "--out-dir",
            "c",
        ],
        tmp.path(),
    );
    assert!(c.status.success(), "{}", String::from_utf8_lossy(&c.stderr));
    for name in ["fig3_sweep.csv", "fig3_cells.csv", "config.toml"] {
        let first = read(tmp.path().join("a").join(name));
        assert_eq!(first, read(tmp.path().join("b").join(name)), "{name}");
        assert_eq!(first, read(tmp.path().join("c").join(name)), "{name}");
    }
    let echo = read(tmp.path().join("a/config.toml"));
    assert!(echo.contains("seeds = [7, 8, 9]"), "{echo}");
}

#[test]
fn invalid_thread_cap_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_otpf"))
        .args(["scalar-uniform"])
        .current_dir(tmp.path())
        .env("OTPF_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
