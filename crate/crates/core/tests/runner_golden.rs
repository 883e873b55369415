use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use mtlab::mesh::DomainSpec;
use mtlab::runner::*;
use serde_json::Value;

fn square(h: f64) -> Option<DomainSource> {
    Some(DomainSource::Spec(DomainSpec::unit_square(h)))
}

fn disk(h: f64) -> Option<DomainSource> {
    Some(DomainSource::Spec(DomainSpec::disk(1.0, h)))
}

fn keys(path: &Path) -> Vec<String> {
    let v: Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    v.as_object().unwrap().keys().cloned().collect()
}

fn header(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

fn outputs(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "manifest.json")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect()
}

#[test]
fn eigen_json_schema() {
    let dir = tempfile::tempdir().unwrap();
    let m = run_experiment(&ExperimentConfig::new(Pipeline::Eigen, dir.path(), square(0.125))).unwrap();
    assert_eq!(m.status, RunStatus::Ok);
    let mut k = keys(&dir.path().join("eigen.json"));
    k.sort();
    assert_eq!(k, ["h", "iterations", "lambda1", "residual", "schema", "schema_version"]);
    let mk = keys(&dir.path().join("manifest.json"));
    for want in ["config_sha256", "inputs", "steps", "status", "mtlab_version", "schema_version"] {
        assert!(mk.iter().any(|k| k == want), "{want}");
    }
}

#[test]
fn csv_headers_are_pinned() {
    assert_eq!(SWEEP_HEADER.join(","), "eps,C_eps,lambda_eps,mu_eps,c_eps,r_eps,bound_ok");
    assert_eq!(TESTFN_HEADER.join(","), "eps,c2_numeric,c2_paper,A,norm_check,integral,bound_B,margin");
    assert_eq!(REPORT_HEADER.join(","), "eps,C_eps,bound_B,testfn_integral,margin");
    assert_eq!(SURVEY_HEADER.join(","), "node_id,x,y,A_p,bound_B");
    assert_eq!(APPENDIX_HEADER.join(","), "eps,item,value,reference,abs_diff,scale,K,error");
}

#[test]
fn full_report_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = ExperimentConfig::new(Pipeline::FullReport, dir.path(), disk(1.0 / 16.0));
    c.params.eps_grid = vec![4.0, 2.0, 1.0];
    c.params.restarts = 2;
    c.params.testfn_eps_grid = vec![1e-3, 1e-4];
    let m = run_experiment(&c).unwrap();
    assert_eq!(m.status, RunStatus::Ok, "{:?}", m.error);
    let report = fs::read_to_string(dir.path().join("report.csv")).unwrap();
    let lines: Vec<&str> = report.lines().collect();
    assert_eq!(lines[0], "eps,C_eps,bound_B,testfn_integral,margin");
    assert_eq!(lines.len(), 6);
    let eps: Vec<f64> = lines[1..].iter().map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert!(eps.windows(2).all(|w| w[1] < w[0]));
    assert_eq!(header(&dir.path().join("sweep.csv")), SWEEP_HEADER.join(","));
    assert_eq!(header(&dir.path().join("testfn.csv")), TESTFN_HEADER.join(","));
    let mut k = keys(&dir.path().join("green.json"));
    k.sort();
    assert_eq!(k, ["A_p", "alpha", "bound_B", "fit", "mean_residual", "node_id", "p", "schema", "schema_version", "weak_residual"]);
}

#[test]
fn identical_configs_give_identical_bytes() {
    let run = |dir: &Path| {
        let mut c = ExperimentConfig::new(Pipeline::Meanfield, dir, square(0.125));
        c.params.rho = 5.0;
        c.params.f = "expr:exp(x - y)".into();
        c.params.samples = 50;
        assert_eq!(run_experiment(&c).unwrap().status, RunStatus::Ok);
        outputs(dir)
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (oa, ob) = (run(a.path()), run(b.path()));
    assert!(oa.contains_key("meanfield.json") && oa.contains_key("meanfield_u.field"));
    assert_eq!(oa, ob);
}

#[test]
fn inadmissible_alpha_is_rejected_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = ExperimentConfig::new(Pipeline::Green, dir.path(), square(0.125));
    c.alpha = 12.0;
    let m = run_experiment(&c).unwrap();
    assert_eq!(m.status, RunStatus::ValidationError);
    assert_eq!(m.exit_code(), 2);
    assert!(!dir.path().join("green.json").exists());
    assert!(m.error.unwrap().contains("not admissible"));
}

#[test]
fn config_files_resolve_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    let mesh = mtlab::mesh::build_mesh(&DomainSpec::unit_square(0.25)).unwrap();
    fs::write(dir.path().join("sq.mesh"), mesh.to_text()).unwrap();
    fs::write(
        dir.path().join("run.toml"),
        "pipeline = \"eigen\"\noutput_dir = \"out\"\n\n[domain]\nmesh = \"sq.mesh\"\n",
    )
    .unwrap();
    let c = ExperimentConfig::from_file(&dir.path().join("run.toml")).unwrap();
    let m = run_experiment(&c).unwrap();
    assert_eq!(m.status, RunStatus::Ok);
    assert_eq!(m.inputs.len(), 1);
    assert!(dir.path().join("out/eigen.json").exists());
}

#[test]
fn plot_series_files() {
    let dir = tempfile::tempdir().unwrap();
    let s = [
        Series::new("empty", "eps", "C_eps", vec![]),
        Series::new("three", "eps", "C_eps", vec![(1.0, 1.2), (0.1, 2.0), (0.01, 3.5)]),
    ];
    let files = emit_plotdata(&s, dir.path()).unwrap();
    assert_eq!(files.len(), 4);
    assert_eq!(fs::read_to_string(dir.path().join("plot_empty.csv")).unwrap(), "eps,C_eps\n");
    let svg = fs::read_to_string(dir.path().join("plot_three.svg")).unwrap();
    let pts = svg.split("points=\"").nth(1).unwrap().split('"').next().unwrap();
    let xs: Vec<f64> = pts.split(' ').map(|p| p.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(xs.len(), 3);
    // eps decreasing along the series, so the vertices run right to left
    assert!(xs.windows(2).all(|w| w[1] <= w[0]));
}
