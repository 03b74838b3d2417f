use std::path::Path;
use std::process::Command;

use levy_refract::cli::{run_experiment, ExperimentConfig, RunOptions, Task, SEED_ENV};
use levy_refract::Error;

const DETERMINISTIC: &str = r#"
[problem]
gamma = 1.0
q = 1.0
beta = 4.0
alpha = 2.0
cost = { name = "quadratic", params = { a = 1.0 } }

[mc]
n_paths = 2
dt = 1e-3
horizon = 20.0

[threshold]
tol = 1e-3

[value]
x0 = [2.0]

[verify]
grid = [0.0]
"#;

const LINEAR: &str = r#"
[problem]
gamma = 0.2
sigma = 1.0
q = 1.0
beta = 1.0
alpha = 1.0
cost = { name = "linear", params = { slope = 3.0 } }

[mc]
n_paths = 50
dt = 0.01
horizon = 5.0
seed = 11

[rho_curve]
b = { lo = -1.0, hi = 1.0, n = 5 }
"#;

const BROWNIAN: &str = r#"
[problem]
sigma = 1.4142135623730951
q = 1.0
beta = 1.0
alpha = 1.0
cost = { name = "quadratic", params = { a = 1.0 } }

[mc]
n_paths = 200
dt = 0.01
horizon = 8.0
seed = 3

[verify]
grid = { lo = -1.0, hi = 1.0, n = 5 }

[scale]
x = [0.0, 0.5, 1.0]

[resolvent]
x = [0.0, 1.0]
y = [-1.0, 0.0, 1.0, 2.0]

[vprime_table]
x = [-1.0, 0.0, 1.0, 2.0]

[sandwich]
x0 = [0.5]
eps = 0.1
"#;

fn cfg(text: &str) -> ExperimentConfig {
    ExperimentConfig::from_toml(text).unwrap()
}

fn opts(dir: &Path) -> RunOptions {
    RunOptions {
        out_dir: Some(dir.to_path_buf()),
        seed: None,
        threads: None,
    }
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect()
}

#[test]
fn deterministic_threshold_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_experiment(&cfg(DETERMINISTIC), Task::SolveThreshold, &opts(dir.path())).unwrap();
    assert!(out.pass());
    let rows = read_csv(&dir.path().join("threshold.csv"));
    let b: f64 = rows[0][0].parse().unwrap();
    assert!((b - 2.0).abs() <= 1e-3);
    assert!(dir.path().join("manifest.json").exists());
    assert!(dir.path().join("resolved_config.toml").exists());
}

#[test]
fn constant_marginal_cost_gives_flat_rho() {
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&cfg(LINEAR), Task::RhoCurve, &opts(dir.path())).unwrap();
    let rows = read_csv(&dir.path().join("rho_curve.csv"));
    assert_eq!(rows.len(), 5);
    for r in rows {
        let rho: f64 = r[1].parse().unwrap();
        assert!((rho - 3.0).abs() < 1e-9, "{rho}");
    }
}

#[test]
fn same_seed_gives_identical_files() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let c = cfg(LINEAR);
    let ra = run_experiment(&c, Task::RhoCurve, &opts(a.path())).unwrap();
    let rb = run_experiment(&c, Task::RhoCurve, &opts(b.path())).unwrap();
    let hash = |m: &levy_refract::cli::Manifest| {
        m.artifacts
            .iter()
            .find(|x| x.file == "rho_curve.csv")
            .unwrap()
            .sha256
            .clone()
    };
    assert_eq!(hash(&ra.manifest), hash(&rb.manifest));
    let other = RunOptions {
        seed: Some(12),
        ..opts(b.path())
    };
    let rc = run_experiment(&c, Task::RhoCurve, &other).unwrap();
    assert_eq!(rc.manifest.seed, 12);
    assert_eq!(rc.manifest.seed_source, "flag");
}

#[test]
fn resolved_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&cfg(DETERMINISTIC), Task::Value, &opts(dir.path())).unwrap();
    let resolved = ExperimentConfig::load(&dir.path().join("resolved_config.toml")).unwrap();
    assert_eq!(resolved.threshold.as_ref().unwrap().tol, 1e-3);
    assert_eq!(resolved.mc.seed, 0);
    let again = tempfile::tempdir().unwrap();
    run_experiment(&resolved, Task::Value, &opts(again.path())).unwrap();
    let a = std::fs::read(dir.path().join("values.csv")).unwrap();
    let b = std::fs::read(again.path().join("values.csv")).unwrap();
    assert_eq!(a, b);
    let rows = read_csv(&dir.path().join("values.csv"));
    let v: f64 = rows[0][2].parse().unwrap();
    assert!((v - 8.0).abs() < 1e-3);
}

#[test]
fn unknown_keys_are_rejected_with_their_path() {
    let bad = DETERMINISTIC.replace("alpha = 2.0", "alpha = 2.0\nalhpa = 1.0");
    match ExperimentConfig::from_toml(&bad) {
        Err(Error::Config { path, .. }) => assert_eq!(path, "problem.alhpa"),
        other => panic!("{other:?}"),
    }
    let bad = DETERMINISTIC.replace("dt = 1e-3", "dt = 1e-3\nsteps = 4");
    match ExperimentConfig::from_toml(&bad) {
        Err(Error::Config { path, message }) => {
            assert_eq!(path, "mc.steps");
            assert!(message.contains("steps"));
        }
        other => panic!("{other:?}"),
    }
    let bad = DETERMINISTIC.replace("{ a = 1.0 }", "{ a = 1.0, b = 2.0 }");
    let c = cfg(&bad);
    let dir = tempfile::tempdir().unwrap();
    match run_experiment(&c, Task::SolveThreshold, &opts(dir.path())) {
        Err(Error::Config { path, .. }) => assert_eq!(path, "problem.cost.params.b"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn invalid_values_report_their_path() {
    let bad = DETERMINISTIC.replace("q = 1.0", "q = -1.0");
    let dir = tempfile::tempdir().unwrap();
    match run_experiment(&cfg(&bad), Task::SolveThreshold, &opts(dir.path())) {
        Err(Error::Config { path, .. }) => assert_eq!(path, "problem"),
        other => panic!("{other:?}"),
    }
    match run_experiment(&cfg(DETERMINISTIC), Task::Compare, &opts(dir.path())) {
        Err(Error::Config { path, .. }) => assert_eq!(path, "compare"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn semi_analytic_tasks_pass_their_checks() {
    let c = cfg(BROWNIAN);
    for task in [Task::VerifyHjb, Task::ScaleTable, Task::ResolventTable, Task::VprimeTable, Task::Sandwich] {
        let dir = tempfile::tempdir().unwrap();
        let out = run_experiment(&c, task, &opts(dir.path())).unwrap();
        assert!(out.pass(), "{task:?}: {:?}", out.manifest.checks);
        assert!(!out.manifest.artifacts.is_empty());
    }
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&c, Task::ScaleTable, &opts(dir.path())).unwrap();
    let rows = read_csv(&dir.path().join("scale.csv"));
    let w: f64 = rows[2][1].parse().unwrap();
    assert!((w - 1f64.sinh()).abs() < 1e-10);
}

#[test]
fn binary_exit_codes_and_seed_env() {
    let exe = env!("CARGO_BIN_EXE_levy-refract");
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("linear.toml");
    std::fs::write(&path, LINEAR).unwrap();
    let out = dir.path().join("out");
    let status = Command::new(exe)
        .args(["rho-curve", "--config"])
        .arg(&path)
        .arg("--out")
        .arg(&out)
        .env(SEED_ENV, "99")
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 99);
    assert_eq!(manifest["seed_source"], "env");

    let status = Command::new(exe)
        .args(["rho-curve", "--seed", "5", "--config"])
        .arg(&path)
        .arg("--out")
        .arg(&out)
        .env(SEED_ENV, "99")
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 5);

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, LINEAR.replace("seed = 11", "seed = 11\nbogus = 1")).unwrap();
    let status = Command::new(exe).args(["rho-curve", "--config"]).arg(&bad).status().unwrap();
    assert_eq!(status.code(), Some(2));
}
