use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mtlab(args: &[&str], dir: &Path, threads: Option<&str>) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mtlab"));
    c.args(args).current_dir(dir);
    match threads {
        Some(t) => c.env("MTLAB_THREADS", t),
        None => c.env_remove("MTLAB_THREADS"),
    };
    c.output().unwrap()
}

fn make_mesh(dir: &Path, domain: &str, h: &str) {
    let o = mtlab(&["mesh", "--domain", domain, "--h", h, "--out", "m.mesh"], dir, None);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn eigen_prints_json() {
    let d = tempfile::tempdir().unwrap();
    make_mesh(d.path(), "square", "0.125");
    let o = mtlab(&["eigen", "--mesh", "m.mesh", "--tol", "1e-10", "--out", "o"], d.path(), None);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let l = v["lambda1"].as_f64().unwrap();
    assert!((l - std::f64::consts::PI.powi(2)).abs() < 0.3, "{l}");
    for k in ["residual", "h", "iterations"] {
        assert!(v.get(k).is_some(), "{k}");
    }
}

#[test]
fn validation_failures_exit_2() {
    let d = tempfile::tempdir().unwrap();
    make_mesh(d.path(), "square", "0.25");
    let o = mtlab(&["meanfield", "--mesh", "m.mesh", "--rho", "12.6", "--out", "o"], d.path(), None);
    assert_eq!(o.status.code(), Some(2));
    let o = mtlab(&["green", "--mesh", "m.mesh", "--alpha", "100", "--out", "o"], d.path(), None);
    assert_eq!(o.status.code(), Some(2));
    let o = mtlab(&["eigen", "--mesh", "missing.mesh", "--out", "o"], d.path(), None);
    assert_eq!(o.status.code(), Some(2));
    let o = mtlab(&["sweep", "--mesh", "m.mesh", "--eps-grid", "1,2", "--out", "o"], d.path(), None);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unreachable_tolerance_exits_3() {
    let d = tempfile::tempdir().unwrap();
    make_mesh(d.path(), "square", "0.25");
    let o = mtlab(&["maximize", "--mesh", "m.mesh", "--eps", "2", "--restarts", "1", "--tol", "1e-300", "--out", "o"], d.path(), None);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    // the result and its field are still written
    assert!(d.path().join("o/maximize.json").exists());
    assert!(d.path().join("o/maximize_u.field").exists());
}

#[test]
fn thread_count_does_not_change_outputs() {
    let d = tempfile::tempdir().unwrap();
    make_mesh(d.path(), "disk", "0.125");
    let mut outs = Vec::new();
    for t in ["1", "3"] {
        let out = format!("o{t}");
        let o = mtlab(&["corollary", "--mesh", "m.mesh", "--samples", "200", "--out", &out], d.path(), Some(t));
        assert!(o.status.success());
        let o2 = mtlab(
            &["meanfield", "--mesh", "m.mesh", "--rho", "3", "--f", "expr:exp(x1)", "--alpha", "1", "--samples", "50", "--out", &out],
            d.path(),
            Some(t),
        );
        assert!(o2.status.success());
        outs.push((o.stdout, fs::read(d.path().join(&out).join("meanfield_u.field")).unwrap()));
    }
    assert_eq!(outs[0], outs[1]);
}

#[test]
fn run_with_config_file() {
    let d = tempfile::tempdir().unwrap();
    fs::write(
        d.path().join("c.toml"),
        "pipeline = \"verify-profile\"\noutput_dir = \"prof\"\n\n[params]\nrmax = 1000.0\nn = 10000\n",
    )
    .unwrap();
    let o = mtlab(&["run", "--config", "c.toml"], d.path(), None);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!((v["mass"].as_f64().unwrap() - 2.0).abs() < 1e-8);
    let o = mtlab(&["run", "--config", "nope.toml"], d.path(), None);
    assert_eq!(o.status.code(), Some(2));
}
