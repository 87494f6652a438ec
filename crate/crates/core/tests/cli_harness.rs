use std::fs;
use std::path::Path;
use std::process::Command;

use hamel_pendulum::scenario::{
    convergence_command, parse_step_list, run_scenario, ConfigError, ConfigLayer, HarnessError,
    IntegratorKind, ScenarioConfig, BODY_HEADER, CONVERGENCE_FILE, EMBEDDED_HEADER, SUMMARY_FILE,
    TRAJECTORY_FILE,
};

fn preset(name: &str, kind: IntegratorKind, steps: usize, out: &Path) -> ScenarioConfig {
    let mut cfg = ConfigLayer::preset(name).unwrap().build().unwrap();
    cfg.integrator = kind;
    cfg.steps = steps;
    cfg.out = out.to_path_buf();
    cfg
}

fn csv_rows(out: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(out.join(TRAJECTORY_FILE))
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn column_max(rows: &[Vec<String>], name: &str) -> f64 {
    let idx = rows[0].iter().position(|c| c == name).unwrap();
    rows[1..]
        .iter()
        .map(|r| r[idx].parse::<f64>().unwrap())
        .fold(0.0, f64::max)
}

#[test]
fn zero_steps_writes_only_the_initial_row() {
    for kind in [
        IntegratorKind::Hamel,
        IntegratorKind::Sv,
        IntegratorKind::Rattle,
        IntegratorKind::Rk4,
    ] {
        let dir = tempfile::tempdir().unwrap();
        let summary = run_scenario(&preset("paper-fig1", kind, 0, dir.path())).unwrap();
        let rows = csv_rows(dir.path());
        assert_eq!(rows.len(), 2, "{kind}");
        assert_eq!(summary.rows, 1);
        assert_eq!(rows[1][0], "0");
    }
}

#[test]
fn headers_match_state_space() {
    let dir = tempfile::tempdir().unwrap();
    run_scenario(&preset("paper-fig1", IntegratorKind::Hamel, 3, dir.path())).unwrap();
    assert_eq!(csv_rows(dir.path())[0].join(","), BODY_HEADER);
    run_scenario(&preset("paper-fig1", IntegratorKind::Rattle, 3, dir.path())).unwrap();
    assert_eq!(csv_rows(dir.path())[0].join(","), EMBEDDED_HEADER);
}

#[test]
fn summary_maxima_match_csv_columns() {
    for kind in [IntegratorKind::Hamel, IntegratorKind::Sv] {
        let dir = tempfile::tempdir().unwrap();
        let summary = run_scenario(&preset("equator-cross", kind, 500, dir.path())).unwrap();
        let rows = csv_rows(dir.path());
        assert_eq!(rows.len(), 502);
        // The CSV carries 17 significant digits, so maxima round-trip exactly.
        assert_eq!(column_max(&rows, "norm_err"), summary.max_norm_error);
        assert_eq!(column_max(&rows, "energy_err"), summary.max_energy_error);
        assert_eq!(
            column_max(&rows, "momentum_err"),
            summary.max_momentum_error
        );
        let json: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join(SUMMARY_FILE)).unwrap())
                .unwrap();
        assert_eq!(json["rows"], 501);
        assert_eq!(
            json["max_energy_error"].as_f64().unwrap(),
            summary.max_energy_error
        );
    }
}

#[test]
fn summary_json_is_deterministic() {
    // The summary records the output directory, so both runs share one.
    let dir = tempfile::tempdir().unwrap();
    let cfg = preset("paper-fig1", IntegratorKind::Hamel, 200, dir.path());
    let runs: Vec<Vec<u8>> = (0..2)
        .map(|_| {
            run_scenario(&cfg).unwrap();
            fs::read(dir.path().join(SUMMARY_FILE)).unwrap()
        })
        .collect();
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn solver_failure_keeps_partial_output() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = preset("paper-fig1", IntegratorKind::Sv, 100, dir.path());
    cfg.max_iterations = 1;
    let err = run_scenario(&cfg).unwrap_err();
    assert!(matches!(err, HarnessError::Solver { .. }), "{err}");
    assert_eq!(err.exit_code(), 3);
    let rows = csv_rows(dir.path());
    assert_eq!(rows[0].join(","), EMBEDDED_HEADER);
    assert!(
        rows.len() >= 2,
        "initial row is flushed before the failing step"
    );
}

#[test]
fn hamel_convergence_is_second_order() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = preset("paper-fig1", IntegratorKind::Hamel, 0, dir.path());
    let report = convergence_command(&cfg, &[0.05, 0.025]).unwrap();
    assert!(
        (1.8..=2.2).contains(&report.orders[0]),
        "{:?}",
        report.orders
    );
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join(CONVERGENCE_FILE)).unwrap())
            .unwrap();
    assert_eq!(json["integrator"], "hamel");
    assert_eq!(json["orders"].as_array().unwrap().len(), 1);
}

#[test]
fn rk4_convergence_is_fourth_order() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = preset("paper-fig1", IntegratorKind::Rk4, 0, dir.path());
    let report = convergence_command(&cfg, &[0.01, 0.005]).unwrap();
    assert!(
        (3.7..=4.3).contains(&report.orders[0]),
        "{:?}",
        report.orders
    );
}

#[test]
fn single_step_size_is_a_usage_error() {
    assert!(matches!(
        parse_step_list("0.05"),
        Err(ConfigError::Usage(_))
    ));
    let dir = tempfile::tempdir().unwrap();
    let cfg = preset("paper-fig1", IntegratorKind::Hamel, 0, dir.path());
    let err = convergence_command(&cfg, &[0.05]).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

fn pendulum() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pendulum"))
}

#[test]
fn binary_runs_a_preset() {
    let dir = tempfile::tempdir().unwrap();
    let status = pendulum()
        .args([
            "--preset",
            "paper-fig1",
            "--steps",
            "50",
            "--integrator",
            "rattle",
            "--out",
        ])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(
        status.status.success(),
        "{}",
        String::from_utf8_lossy(&status.stderr)
    );
    assert_eq!(csv_rows(dir.path()).len(), 52);
    assert!(dir.path().join(SUMMARY_FILE).exists());
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = pendulum().arg("--out").arg(dir.path()).output().unwrap();
    assert_eq!(missing.status.code(), Some(2));

    let config = dir.path().join("bad.cfg");
    fs::write(
        &config,
        "m = 1\nr = 9.8\nh = 0.2\nsteps = 10\nomega0 = 0.6, 0, 0\ngamma0 = 3, 0, 0\n",
    )
    .unwrap();
    let invalid = pendulum().arg("--config").arg(&config).output().unwrap();
    assert_eq!(invalid.status.code(), Some(2));

    let blocker = dir.path().join("file");
    fs::write(&blocker, "").unwrap();
    let io = pendulum()
        .args(["--preset", "paper-fig1", "--steps", "1", "--out"])
        .arg(blocker.join("sub"))
        .output()
        .unwrap();
    assert_eq!(io.status.code(), Some(4));
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.cfg");
    fs::write(
        &config,
        "# equator run\nm = 1\nr = 9.8\nh = 0.2\nsteps = 1000\nomega0 = 0.9, 0, 0\ngamma0 = 0.6, 0, 0.8\n",
    )
    .unwrap();
    let out = dir.path().join("out");
    let status = pendulum()
        .arg("--config")
        .arg(&config)
        .args(["--steps", "5", "--h", "0.1", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(
        status.status.success(),
        "{}",
        String::from_utf8_lossy(&status.stderr)
    );
    let rows = csv_rows(&out);
    assert_eq!(rows.len(), 7);
    let t: f64 = rows[2][1].parse().unwrap();
    assert!(
        (t - 0.15).abs() < 1e-15,
        "second hamel row sits at 1.5 h, got {t}"
    );
}
