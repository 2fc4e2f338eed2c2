use std::process::Command;

use avgproc::harness::{run_experiment, run_replicas, ExperimentConfig, ExperimentKind};
use avgproc::lattice::{Field, FourierSpec, FourierTerm, TorusLattice};
use avgproc::malliavin::{mean_with_stderr, poincare_check, PoincareParams};
use avgproc::observables::WeightSpec;
use avgproc::quad::fit_slope;
use avgproc::sim::{ClockTrajectory, SimError, SimState};

fn gamma_config(replicas: usize) -> ExperimentConfig {
    ExperimentConfig {
        kind: ExperimentKind::Lln,
        d: 1,
        n: 16,
        t: 0.1,
        replicas,
        seed: 5,
        ..Default::default()
    }
}

#[test]
fn doubling_replicas_halves_squared_stderr() {
    let se = |r: usize| {
        let rep = run_experiment(&gamma_config(r)).unwrap();
        rep.row("mean gamma n=16").unwrap().stderr.unwrap()
    };
    let (a, b) = (se(1000), se(2000));
    let ratio = (a / b).powi(2);
    assert!((ratio - 2.0).abs() <= 0.25 * 2.0, "variance ratio {ratio}");
}

#[test]
fn report_reruns_from_its_config_echo() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        output: Some(dir.path().into()),
        ..gamma_config(60)
    };
    let first = run_experiment(&cfg).unwrap();
    let text = std::fs::read_to_string(dir.path().join("lln.summary.json")).unwrap();
    let json: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(json["config"]["seed"], 5);
    let echoed: ExperimentConfig = serde_json::from_value(json["config"].clone()).unwrap();
    let again = run_experiment(&ExperimentConfig { output: None, ..echoed }).unwrap();
    assert_eq!(first.rows, again.rows);
    assert!(first.rows.iter().filter(|r| r.target.is_some()).all(|r| r.provenance.is_some()));
    let csv = std::fs::read_to_string(dir.path().join("lln.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.starts_with("5,")));
}

#[test]
fn stratified_and_uniform_rhs_agree() {
    let base = PoincareParams {
        d: 1,
        n: 8,
        t: 0.3,
        u0: FourierSpec::single_cos(vec![1]),
        g: WeightSpec::constant(1, 1.0),
        replicas: 200,
        samples: 50,
        seed: 12,
        strata: 8,
    };
    let strat = poincare_check(&base).unwrap();
    let unif = poincare_check(&PoincareParams { strata: 1, seed: 13, ..base }).unwrap();
    let gap = (strat.rhs - unif.rhs).abs();
    let se = (strat.rhs_stderr.powi(2) + unif.rhs_stderr.powi(2)).sqrt();
    assert!(gap <= 4.0 * se, "{} vs {} (se {se})", strat.rhs, unif.rhs);
}

#[test]
fn energy_contracts_and_decays_from_point_mass() {
    let n = 32;
    let l = TorusLattice::new(1, n).unwrap();
    let mut v = vec![0.0; n];
    v[0] = n as f64;
    let u0 = Field::new(l, v).unwrap();
    let eps = 1.0 / n as f64;
    let (lo, hi) = (4.0 * eps * eps, 0.5f64);
    let times: Vec<f64> = (0..8).map(|k| lo * (hi / lo).powf(k as f64 / 7.0)).collect();
    let rows = run_replicas(21, 400, |_, seed| {
        let clocks = ClockTrajectory::generate(l, seed, hi)?;
        let mut st = SimState::new(u0.clone());
        let mut out = Vec::new();
        for &t in &times {
            st.run_until(&clocks, t, &mut [])?;
            out.push(st.field().h1_norm_sq());
        }
        Ok::<_, SimError>(out)
    })
    .unwrap();
    let mut logs = Vec::new();
    for k in 0..times.len() {
        let col: Vec<f64> = rows.iter().map(|r| r[k]).collect();
        let (m, se) = mean_with_stderr(&col);
        assert!(m <= 2.0 * u0.h1_norm_sq() * (1.0 + 4.0 * se / m));
        logs.push(m.ln());
    }
    let xs: Vec<f64> = times.iter().map(|t| t.ln()).collect();
    let slope = fit_slope(&xs, &logs);
    assert!(slope <= -1.5 + 0.3, "slope {slope}");
}

#[test]
fn anisotropic_lln_separates_covariances() {
    let rep = run_experiment(&ExperimentConfig {
        kind: ExperimentKind::Lln,
        d: 2,
        n: 8,
        t: 0.2,
        u0: FourierSpec(vec![FourierTerm::new(vec![0, 1], 1.0, 0.0)]),
        g: Some(WeightSpec::single_direction(2, 0, 1.0)),
        replicas: 200,
        seed: 3,
        ..Default::default()
    })
    .unwrap();
    assert!(rep.passed());
}

fn cli(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_avgproc"))
        .args(args)
        .output()
        .unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

#[test]
fn cli_constants_and_errors() {
    let (code, csv, checks) = cli(&["constants", "--d", "2", "--n", "64", "--quad", "1024"]);
    assert_eq!(code, 0, "{checks}");
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("seed,d,n,b_eps,c_eps,b,c,a"));
    assert!(lines.next().unwrap().starts_with("0,2,64,"));
    assert!(checks.contains("PASS") && !checks.contains("FAIL"));
    let (code, _, _) = cli(&["simulate", "--t", "-1"]);
    assert_eq!(code, 2);
    let (code, _, err) = cli(&["lln", "--u0", "not json"]);
    assert_eq!(code, 2);
    assert!(err.contains("--u0"));
}

#[test]
fn cli_outputs_are_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        let (code, _, _) = cli(&[
            "fclt",
            "--n",
            "8",
            "--replicas",
            "20",
            "--seed",
            "9",
            "--threads",
            "2",
            "--output",
            dir.path().to_str().unwrap(),
        ]);
        assert!(code == 0 || code == 1);
    }
    let read = |d: &tempfile::TempDir| std::fs::read(d.path().join("fclt.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
}
