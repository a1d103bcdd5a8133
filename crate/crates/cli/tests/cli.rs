use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

fn emctl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_emctl")).args(args).output().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn field(text: &str, key: &str) -> f64 {
    let line = text.lines().find(|l| l.trim_start().starts_with(key)).unwrap_or_else(|| panic!("{key} missing:\n{text}"));
    line.trim_start()[key.len()..].split_whitespace().next().unwrap().parse().unwrap()
}

/// Rows of a trajectory CSV, without the V column.
fn rows(csv: &str) -> Vec<Vec<f64>> {
    csv.lines()
        .skip(1)
        .map(|l| l.split(',').filter(|c| !c.is_empty()).map(|c| c.parse().unwrap()).collect())
        .collect()
}

fn write_json(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn equilibrium_reports_differences() {
    let out = emctl(&["equilibrium", "--network", fixture("three_gen.json").to_str().unwrap()]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!((field(&text, "1-2") + 0.1588).abs() < 5e-4, "{text}");
    assert!((field(&text, "2-3") - 0.0594).abs() < 5e-4, "{text}");
    assert!(text.contains("in_polytope: true"));
}

#[test]
fn zero_injections_give_zero_differences() {
    let dir = tempfile::tempdir().unwrap();
    let net = write_json(
        dir.path(),
        "flat.json",
        r#"{"buses": [
            {"id": 1, "kind": "generator", "voltage": 1.0, "inertia": 1.0, "damping": 1.0, "injection": 0.0},
            {"id": 2, "kind": "load", "voltage": 1.0, "damping": 1.0, "injection": 0.0}
        ], "lines": [{"from": 1, "to": 2, "susceptance": 1.0}]}"#,
    );
    let out = emctl(&["equilibrium", "--network", net.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(field(&stdout(&out), "1-2").abs() < 1e-12);
}

#[test]
fn imbalanced_network_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let net = write_json(
        dir.path(),
        "bad.json",
        r#"{"buses": [
            {"id": 1, "kind": "generator", "voltage": 1.0, "inertia": 1.0, "damping": 1.0, "injection": 0.5},
            {"id": 2, "kind": "generator", "voltage": 1.0, "inertia": 1.0, "damping": 1.0, "injection": 0.0}
        ], "lines": [{"from": 1, "to": 2, "susceptance": 1.0}]}"#,
    );
    let out = emctl(&["equilibrium", "--network", net.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn bad_usage_exits_one() {
    assert_eq!(emctl(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(emctl(&["equilibrium", "--network", "/nonexistent.json"]).status.code(), Some(1));
    assert_eq!(emctl(&["--help"]).status.code(), Some(0));
}

#[test]
fn certify_imported_certificate() {
    let out = emctl(&[
        "certify",
        "--network",
        fixture("three_gen.json").to_str().unwrap(),
        "--import-P",
        fixture("three_gen_P.json").to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stdout(&out));
    assert!((field(&stdout(&out), "V_min:") - 0.908).abs() < 1e-3);
}

#[test]
fn certify_with_uniform_gamma() {
    let out = emctl(&["certify", "--network", fixture("three_gen.json").to_str().unwrap(), "--gamma", "0.3142"]);
    assert!(out.status.success(), "{}", stdout(&out));
    let text = stdout(&out);
    let g = field(&text, "g:");
    let oracle = (1.0 - 0.3142f64.sin()) / (std::f64::consts::FRAC_PI_2 - 0.3142);
    assert!((g - oracle).abs() < 1e-5, "{g} vs {oracle}");
    assert!(field(&text, "V_min:") > 0.0);
}

#[test]
fn tiny_damping_is_infeasible() {
    let out = emctl(&["certify", "--network", fixture("tiny_damping.json").to_str().unwrap(), "--from-equilibrium"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn certificate_round_trips_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let cert = dir.path().join("cert.json");
    let net = fixture("three_gen.json");
    let first = emctl(&["certify", "--network", net.to_str().unwrap(), "--from-equilibrium", "--out", cert.to_str().unwrap()]);
    assert!(first.status.success(), "{}", stdout(&first));
    let second = emctl(&["certify", "--network", net.to_str().unwrap(), "--import-P", cert.to_str().unwrap()]);
    assert!(second.status.success(), "{}", stdout(&second));
    assert_eq!(field(&stdout(&first), "V_min:"), field(&stdout(&second), "V_min:"));
}

#[test]
fn fault_on_design_drives_simulation() {
    let dir = tempfile::tempdir().unwrap();
    let design = dir.path().join("design.json");
    let net = fixture("three_gen.json");
    let out = emctl(&[
        "design-faulton",
        "--network",
        net.to_str().unwrap(),
        "--trip",
        "1-3",
        "--lines",
        "1-2,2-3",
        "--import-P",
        fixture("three_gen_P.json").to_str().unwrap(),
        "--out",
        design.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&design).unwrap()).unwrap();
    assert_eq!(json["tripped"], "1-3");

    let traj = dir.path().join("traj.csv");
    let sim = emctl(&[
        "simulate",
        "--network",
        net.to_str().unwrap(),
        "--design",
        design.to_str().unwrap(),
        "--lyapunov",
        fixture("three_gen_P.json").to_str().unwrap(),
        "--out",
        traj.to_str().unwrap(),
    ]);
    assert!(sim.status.success(), "{}", String::from_utf8_lossy(&sim.stderr));
    let text = stdout(&sim);
    assert!(text.contains("diverged: false") && text.contains("converged at"), "{text}");
    let csv = std::fs::read_to_string(&traj).unwrap();
    assert!(csv.starts_with("t,delta_1,delta_2,delta_3,omega_1,omega_2,omega_3,V"));
}

#[test]
fn simulation_without_fault_stays_at_equilibrium() {
    let out = emctl(&["simulate", "--network", fixture("three_gen.json").to_str().unwrap(), "--t-end", "0.5"]);
    assert!(out.status.success());
    let rows = rows(&stdout(&out));
    let first = &rows[0];
    for r in &rows {
        for (a, b) in r[1..].iter().zip(&first[1..]) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn halving_dt_shows_fourth_order() {
    let net = fixture("three_gen.json");
    let x0 = fixture("fault_cleared.json");
    let end = |dt: &str| {
        let out = emctl(&["simulate", "--network", net.to_str().unwrap(), "--x0", x0.to_str().unwrap(), "--t-end", "1", "--dt", dt]);
        assert!(out.status.success());
        rows(&stdout(&out)).pop().unwrap()
    };
    let (a, b, c) = (end("0.1"), end("0.05"), end("0.025"));
    let diff = |u: &[f64], v: &[f64]| u[1..].iter().zip(&v[1..]).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let ratio = diff(&a, &b) / diff(&b, &c);
    assert!((12.0..20.0).contains(&ratio), "ratio {ratio}");
}

#[test]
fn postfault_design_with_wide_box_simulates() {
    let dir = tempfile::tempdir().unwrap();
    let (design, cert) = (dir.path().join("post.json"), dir.path().join("post_P.json"));
    let net = fixture("three_gen.json");
    let x0 = fixture("fault_cleared.json");
    let out = emctl(&[
        "design-postfault",
        "--network",
        net.to_str().unwrap(),
        "--state",
        x0.to_str().unwrap(),
        "--lines",
        "1-2,2-3",
        "--boxes",
        "0.001:1.2,0.6225:1.8675",
        "--out",
        design.to_str().unwrap(),
        "--cert-out",
        cert.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&design).unwrap()).unwrap();
    assert_eq!(json["contained"], true);

    let sim = emctl(&[
        "simulate",
        "--network",
        net.to_str().unwrap(),
        "--design",
        design.to_str().unwrap(),
        "--x0",
        x0.to_str().unwrap(),
        "--t-end",
        "40",
        "--lyapunov",
        cert.to_str().unwrap(),
        "--out",
        dir.path().join("traj.csv").to_str().unwrap(),
    ]);
    assert!(sim.status.success(), "{}", String::from_utf8_lossy(&sim.stderr));
    assert!(stdout(&sim).contains("converged at"), "{}", stdout(&sim));
}
