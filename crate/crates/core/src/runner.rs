//! Experiment runner: a TOML config names a pipeline, the domain and the
//! parameters; every output lands in one directory together with a
//! manifest of hashes and timings.
//!
//! Outputs are reproducible byte for byte. All randomness derives from the
//! config seed and every parallel reduction has a fixed order, so the thread
//! count does not matter. Only the timings in `manifest.json` vary.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::fem::{Field, FemSpace};
use crate::green::{boundary_samples, bound_over_boundary, solve_green, GreenResult};
use crate::meanfield::{check_corollary, coercivity_witness, corollary_stability, minimize_f, rho_sweep, MeanFieldProblem};
use crate::mesh::{build_mesh, pick_boundary_point, sha256_hex, DomainKind, DomainSpec, Mesh, Point};
use crate::moser::{
    appendix_integrals, build_test_function, lower_bound_sweep, order_constant_spread, verify_profile, AppendixParams,
    BlowupProfile, LocalModel, APPENDIX_ITEMS, MIN_PROFILE_POINTS, MIN_PROFILE_RMAX,
};
use crate::solver::NeumannSystem;
use crate::spectral::{check_alpha, neumann_lambda1, EigenResult};
use crate::subcritical::{blowup_diagnostics, maximize_subcritical, sweep, SubcriticalParams};

pub const SCHEMA_VERSION: u32 = 1;

/// Environment variable holding the worker thread count.
pub const THREADS_ENV: &str = "MTLAB_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pipeline {
    Eigen,
    Maximize,
    Sweep,
    Green,
    GreenSurvey,
    Testfn,
    VerifyProfile,
    Appendix,
    Meanfield,
    Corollary,
    FullReport,
}

impl Pipeline {
    /// The file holding the pipeline's main result.
    pub fn primary_output(self) -> &'static str {
        match self {
            Pipeline::Eigen => "eigen.json",
            Pipeline::Maximize => "maximize.json",
            Pipeline::Sweep => "sweep.csv",
            Pipeline::Green => "green.json",
            Pipeline::GreenSurvey => "green_survey.csv",
            Pipeline::Testfn => "testfn.csv",
            Pipeline::VerifyProfile => "profile.json",
            Pipeline::Appendix => "appendix.csv",
            Pipeline::Meanfield => "meanfield.json",
            Pipeline::Corollary => "corollary.json",
            Pipeline::FullReport => "report.csv",
        }
    }

    fn needs_domain(self) -> bool {
        !matches!(self, Pipeline::VerifyProfile | Pipeline::Appendix)
    }
}

/// A mesh file or a generated domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DomainSource {
    File { mesh: PathBuf },
    Spec(DomainSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    pub eigen: f64,
    pub linear: f64,
    pub maximize: f64,
    pub meanfield: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { eigen: 1e-10, linear: 1e-12, maximize: 1e-8, meanfield: 1e-10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Params {
    /// maximize
    pub eps: f64,
    /// sweep and full-report, strictly decreasing
    pub eps_grid: Vec<f64>,
    /// testfn, appendix and full-report
    pub testfn_eps_grid: Vec<f64>,
    pub restarts: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_hint: Option<Point>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fit_annulus: Option<[f64; 2]>,
    pub survey_samples: usize,
    /// corollary samples per seed
    pub samples: usize,
    /// number of corollary seeds, starting at the run seed
    pub seeds: usize,
    pub rho: f64,
    /// `expr:<expression>` or the path of a field file
    pub f: String,
    /// meanfield: extra warm-started rho sweep up to rho when positive
    pub rho_sweep_steps: usize,
    pub rmax: f64,
    pub n: usize,
    /// appendix without a domain: flat local model with this A_p and area
    pub a_p: f64,
    pub area: f64,
}

impl Default for Params {
    fn default() -> Self {
        Self {
            eps: 1.0,
            eps_grid: vec![5.0, 4.0, 3.0, 2.0, 1.5, 1.0],
            testfn_eps_grid: vec![1e-3, 1e-4, 1e-5],
            restarts: 8,
            p_hint: None,
            fit_annulus: None,
            survey_samples: 16,
            samples: 1000,
            seeds: 3,
            rho: 4.0,
            f: "expr:1".into(),
            rho_sweep_steps: 0,
            rmax: 1e3,
            n: 10_000,
            a_p: 0.0,
            area: PI,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub pipeline: Pipeline,
    #[serde(default)]
    pub alpha: f64,
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<DomainSource>,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub params: Params,
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}

fn check_eps_grid(grid: &[f64], name: &str, max: f64) -> Result<()> {
    if grid.is_empty() {
        return Err(invalid(format!("{name} is empty")));
    }
    if let Some(e) = grid.iter().find(|e| !(**e > 0.0 && **e <= max)) {
        return Err(invalid(format!("{name} entries must lie in (0, {max}], found {e}")));
    }
    if grid.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(invalid(format!("{name} must be strictly decreasing")));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn new(pipeline: Pipeline, output_dir: impl Into<PathBuf>, domain: Option<DomainSource>) -> Self {
        Self {
            pipeline,
            alpha: 0.0,
            seed: 0,
            output_dir: output_dir.into(),
            domain,
            tolerances: Tolerances::default(),
            params: Params::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// Loads a config; relative paths inside it are taken relative to the
    /// file's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_toml(&fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        rebase(&mut cfg.output_dir);
        if let Some(DomainSource::File { mesh }) = &mut cfg.domain {
            rebase(mesh);
        }
        if !cfg.params.f.starts_with("expr:") {
            let mut f = PathBuf::from(&cfg.params.f);
            rebase(&mut f);
            cfg.params.f = f.to_string_lossy().into_owned();
        }
        Ok(cfg)
    }

    /// Range checks that need no mesh. Runs before any solve.
    pub fn validate(&self) -> Result<()> {
        let p = &self.params;
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(invalid(format!("alpha must be a finite non-negative number, got {}", self.alpha)));
        }
        let t = &self.tolerances;
        for (name, v) in [("eigen", t.eigen), ("linear", t.linear), ("maximize", t.maximize), ("meanfield", t.meanfield)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(invalid(format!("tolerance {name} must lie in (0, 1), got {v}")));
            }
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(invalid("output_dir is empty"));
        }
        match (&self.domain, self.pipeline.needs_domain()) {
            (None, true) => return Err(invalid(format!("pipeline {:?} needs a domain", self.pipeline))),
            (Some(DomainSource::File { mesh }), _) if !mesh.is_file() => {
                return Err(invalid(format!("mesh file {} does not exist", mesh.display())));
            }
            (Some(DomainSource::Spec(s)), _) => s.validate()?,
            _ => {}
        }
        if let Some([a, b]) = p.fit_annulus {
            if !(a > 0.0 && b > a) {
                return Err(invalid(format!("fit_annulus needs 0 < r_in < r_out, got {a}, {b}")));
            }
        }
        match self.pipeline {
            Pipeline::Maximize => SubcriticalParams { eps: p.eps, ..self.subcritical() }.validate()?,
            Pipeline::Sweep => {
                check_eps_grid(&p.eps_grid, "eps_grid", 2.0 * PI)?;
                self.subcritical().validate()?;
            }
            Pipeline::Testfn | Pipeline::Appendix => check_eps_grid(&p.testfn_eps_grid, "testfn_eps_grid", 1.0)?,
            Pipeline::FullReport => {
                check_eps_grid(&p.eps_grid, "eps_grid", 2.0 * PI)?;
                check_eps_grid(&p.testfn_eps_grid, "testfn_eps_grid", 1.0)?;
                self.subcritical().validate()?;
            }
            Pipeline::GreenSurvey if p.survey_samples < 4 => {
                return Err(invalid(format!("survey_samples must be at least 4, got {}", p.survey_samples)));
            }
            Pipeline::Meanfield => {
                if !(p.rho > 0.0 && p.rho < 4.0 * PI) {
                    return Err(invalid(format!("rho must lie in (0, 4 pi), got {}", p.rho)));
                }
                match p.f.strip_prefix("expr:") {
                    Some(e) => {
                        Expr::parse(e)?;
                    }
                    None if !Path::new(&p.f).is_file() => {
                        return Err(invalid(format!("f is neither `expr:...` nor an existing field file: {}", p.f)));
                    }
                    None => {}
                }
                if p.samples == 0 {
                    return Err(invalid("samples must be positive"));
                }
            }
            Pipeline::Corollary if p.samples == 0 || p.seeds == 0 => {
                return Err(invalid("samples and seeds must be positive"));
            }
            Pipeline::VerifyProfile if !(p.rmax >= MIN_PROFILE_RMAX) || p.n < MIN_PROFILE_POINTS => {
                return Err(invalid(format!(
                    "profile grid needs rmax >= {MIN_PROFILE_RMAX} and n >= {MIN_PROFILE_POINTS}, got {} and {}",
                    p.rmax, p.n
                )));
            }
            _ => {}
        }
        Ok(())
    }

    fn subcritical(&self) -> SubcriticalParams {
        SubcriticalParams {
            eps: self.params.eps_grid.first().copied().unwrap_or(self.params.eps),
            alpha: self.alpha,
            restarts: self.params.restarts,
            tol: self.tolerances.maximize,
            max_iter: SubcriticalParams::new(1.0, 0.0).max_iter,
            seed: self.seed,
        }
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.to_toml().as_bytes())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    Ok,
    ValidationError,
    SolverFailure,
    /// Completed, but an iterative method stopped short of its tolerance.
    NotConverged,
}

impl RunStatus {
    pub fn exit_code(self) -> i32 {
        match self {
            RunStatus::Ok => 0,
            RunStatus::ValidationError => 2,
            RunStatus::SolverFailure | RunStatus::NotConverged => 3,
        }
    }

    fn of(e: &Error) -> Self {
        if e.is_solver_failure() {
            RunStatus::SolverFailure
        } else {
            RunStatus::ValidationError
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    pub name: String,
    pub seconds: f64,
    pub status: RunStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub outputs: Vec<FileRecord>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub mtlab_version: String,
    pub pipeline: Pipeline,
    pub config_sha256: String,
    pub inputs: Vec<FileRecord>,
    pub steps: Vec<StepRecord>,
    pub status: RunStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub total_seconds: f64,
}

impl RunManifest {
    pub fn exit_code(&self) -> i32 {
        self.status.exit_code()
    }

    /// Every output file of every step, in order of creation.
    pub fn outputs(&self) -> impl Iterator<Item = &FileRecord> {
        self.steps.iter().flat_map(|s| s.outputs.iter())
    }
}

/// Adds a schema tag to a JSON output.
#[derive(Serialize)]
struct Versioned<'a, T: Serialize> {
    schema: &'static str,
    schema_version: u32,
    #[serde(flatten)]
    body: &'a T,
}

/// Files written by one step.
pub struct Outputs {
    dir: PathBuf,
    written: Vec<FileRecord>,
}

impl Outputs {
    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        fs::write(self.dir.join(name), bytes)?;
        self.written.push(FileRecord { path: name.into(), sha256: sha256_hex(bytes) });
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, schema: &'static str, body: &T) -> Result<()> {
        let v = Versioned { schema, schema_version: SCHEMA_VERSION, body };
        let mut s = serde_json::to_string_pretty(&v).map_err(|e| invalid(e.to_string()))?;
        s.push('\n');
        self.write(name, s.as_bytes())
    }

    fn csv(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        self.write(name, csv_text(header, rows).as_bytes())
    }

    fn plots(&mut self, series: &[Series]) -> Result<()> {
        for s in series {
            self.write(&format!("plot_{}.csv", s.name), s.to_csv().as_bytes())?;
            self.write(&format!("plot_{}.svg", s.name), s.to_svg().as_bytes())?;
        }
        Ok(())
    }
}

pub fn csv_text(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut s = header.join(",");
    s.push('\n');
    for r in rows {
        s.push_str(&r.join(","));
        s.push('\n');
    }
    s
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn opt_num(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

/// A two-column data series for plotting.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub x_label: String,
    pub y_label: String,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    pub fn new(name: &str, x_label: &str, y_label: &str, points: Vec<(f64, f64)>) -> Self {
        Self { name: name.into(), x_label: x_label.into(), y_label: y_label.into(), points }
    }

    pub fn to_csv(&self) -> String {
        let rows: Vec<Vec<String>> = self.points.iter().map(|(x, y)| vec![num(*x), num(*y)]).collect();
        csv_text(&[&self.x_label, &self.y_label], &rows)
    }

    /// Minimal line chart. The x axis is logarithmic when every x is
    /// positive and they span more than two decades. Points are joined in
    /// the given order.
    pub fn to_svg(&self) -> String {
        const W: f64 = 640.0;
        const H: f64 = 400.0;
        const PAD: f64 = 50.0;
        let pts: Vec<(f64, f64)> = self.points.iter().copied().filter(|(x, y)| x.is_finite() && y.is_finite()).collect();
        let xmin = pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        let xmax = pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        let log_x = xmin > 0.0 && xmax / xmin > 100.0;
        let tx = |x: f64| if log_x { x.log10() } else { x };
        let (x0, x1) = (tx(xmin), tx(xmax));
        let y0 = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let y1 = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        let scale = |v: f64, lo: f64, hi: f64| if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
        let mut poly = String::new();
        for (i, (x, y)) in pts.iter().enumerate() {
            let sx = PAD + scale(tx(*x), x0, x1) * (W - 2.0 * PAD);
            let sy = H - PAD - scale(*y, y0, y1) * (H - 2.0 * PAD);
            if i > 0 {
                poly.push(' ');
            }
            let _ = write!(poly, "{sx:.2},{sy:.2}");
        }
        let mut s = String::new();
        let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
        let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<path d="M{PAD} {PAD} V{b} H{r}" fill="none" stroke="black"/>"#,
            b = H - PAD,
            r = W - PAD
        );
        let xl = if log_x { format!("{} (log scale)", self.x_label) } else { self.x_label.clone() };
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 12.0, xml_escape(&xl));
        let _ = writeln!(
            s,
            r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
            H / 2.0,
            H / 2.0,
            xml_escape(&self.y_label)
        );
        let _ = writeln!(s, r#"<polyline fill="none" stroke="steelblue" stroke-width="2" points="{poly}"/>"#);
        s.push_str("</svg>\n");
        s
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Writes `plot_<name>.csv` and `plot_<name>.svg` for every series.
pub fn emit_plotdata(series: &[Series], dir: &Path) -> Result<Vec<FileRecord>> {
    fs::create_dir_all(dir)?;
    let mut out = Outputs { dir: dir.to_path_buf(), written: Vec::new() };
    out.plots(series)?;
    Ok(out.written)
}

struct Run<'a> {
    cfg: &'a ExperimentConfig,
    dir: PathBuf,
    steps: Vec<StepRecord>,
    inputs: Vec<FileRecord>,
    unconverged: bool,
}

impl Run<'_> {
    fn step<T>(&mut self, name: &str, f: impl FnOnce(&mut Outputs) -> Result<T>) -> Result<T> {
        let t = Instant::now();
        let mut out = Outputs { dir: self.dir.clone(), written: Vec::new() };
        let r = f(&mut out);
        self.steps.push(StepRecord {
            name: name.into(),
            seconds: t.elapsed().as_secs_f64(),
            status: match &r {
                Ok(_) => RunStatus::Ok,
                Err(e) => RunStatus::of(e),
            },
            error: r.as_ref().err().map(|e| e.to_string()),
            outputs: out.written,
        });
        r
    }

    fn flag_unconverged(&mut self, converged: bool) {
        if !converged {
            self.unconverged = true;
            if let Some(s) = self.steps.last_mut() {
                s.status = RunStatus::NotConverged;
            }
        }
    }

    fn load_mesh(&mut self) -> Result<Mesh> {
        match self.cfg.domain.as_ref().expect("validated") {
            DomainSource::File { mesh } => {
                let text = fs::read_to_string(mesh)?;
                self.inputs.push(FileRecord { path: mesh.display().to_string(), sha256: sha256_hex(text.as_bytes()) });
                Mesh::from_text(&text)
            }
            DomainSource::Spec(s) => build_mesh(s),
        }
    }

    fn system(&mut self) -> Result<NeumannSystem> {
        let mesh = self.load_mesh()?;
        self.step("mesh", |_| NeumannSystem::new(FemSpace::new(mesh)?))
    }

    /// First eigenpair, and rejection of alpha >= lambda1 before anything
    /// else is solved.
    fn eigen(&mut self, sys: &NeumannSystem, write: bool) -> Result<EigenResult> {
        let (alpha, tol) = (self.cfg.alpha, self.cfg.tolerances.eigen);
        self.step("eigen", |out| {
            let r = neumann_lambda1(sys, tol)?;
            if write {
                out.json("eigen.json", "mtlab.eigen", &r)?;
            }
            check_alpha(alpha, r.lambda1)?;
            Ok(r)
        })
    }

    fn check_alpha(&mut self, sys: &NeumannSystem) -> Result<()> {
        if self.cfg.alpha > 0.0 {
            self.eigen(sys, false)?;
        }
        Ok(())
    }

    fn p_hint(&self, sys: &NeumannSystem) -> Point {
        let mesh = sys.space().mesh();
        self.cfg.params.p_hint.unwrap_or_else(|| match &self.cfg.domain {
            Some(DomainSource::Spec(DomainSpec { kind: DomainKind::Disk { radius }, .. })) => [*radius, 0.0],
            _ => mesh.nodes()[boundary_samples(sys, 1)[0]],
        })
    }

    fn green(&mut self, sys: &NeumannSystem) -> Result<GreenResult> {
        let hint = self.p_hint(sys);
        let (alpha, tol) = (self.cfg.alpha, self.cfg.tolerances.linear);
        let radii = self.cfg.params.fit_annulus.map(|[a, b]| (a, b));
        self.step("green", |out| {
            let bp = pick_boundary_point(sys.space().mesh(), hint);
            let g = solve_green(sys, alpha, bp, tol, radii)?;
            out.json("green.json", "mtlab.green", &GreenSummary::from(&g))?;
            Ok(g)
        })
    }
}

#[derive(Serialize)]
struct GreenSummary {
    #[serde(rename = "A_p")]
    a_p: f64,
    #[serde(rename = "bound_B")]
    bound_b: f64,
    mean_residual: f64,
    weak_residual: f64,
    node_id: usize,
    p: Point,
    alpha: f64,
    fit: FitDiagnostics,
}

#[derive(Serialize)]
struct FitDiagnostics {
    r_in: f64,
    r_out: f64,
    nodes: usize,
    rms: f64,
    slope: [f64; 2],
}

impl From<&GreenResult> for GreenSummary {
    fn from(g: &GreenResult) -> Self {
        Self {
            a_p: g.a_p,
            bound_b: g.bound_b,
            mean_residual: g.mean_residual,
            weak_residual: g.weak_residual,
            node_id: g.node_id,
            p: g.p,
            alpha: g.alpha,
            fit: FitDiagnostics { r_in: g.fit_radii.0, r_out: g.fit_radii.1, nodes: g.fit_nodes, rms: g.fit_rms, slope: g.fit_slope },
        }
    }
}

pub const SWEEP_HEADER: [&str; 7] = ["eps", "C_eps", "lambda_eps", "mu_eps", "c_eps", "r_eps", "bound_ok"];
pub const TESTFN_HEADER: [&str; 8] = ["eps", "c2_numeric", "c2_paper", "A", "norm_check", "integral", "bound_B", "margin"];
pub const SURVEY_HEADER: [&str; 5] = ["node_id", "x", "y", "A_p", "bound_B"];
pub const APPENDIX_HEADER: [&str; 8] = ["eps", "item", "value", "reference", "abs_diff", "scale", "K", "error"];
pub const REPORT_HEADER: [&str; 5] = ["eps", "C_eps", "bound_B", "testfn_integral", "margin"];
pub const RHO_SWEEP_HEADER: [&str; 6] = ["rho", "F", "residual", "u_norm_1alpha", "iterations", "converged"];

#[derive(Serialize)]
struct MeanFieldSummary<'a> {
    alpha: f64,
    rho: f64,
    f: &'a str,
    mesh_sha256: String,
    #[serde(flatten)]
    solution: &'a crate::meanfield::MeanFieldSolution,
    #[serde(rename = "C_emp")]
    c_emp: f64,
    coercivity_ok: bool,
}

#[derive(Serialize)]
struct Entries<'a, T> {
    entries: &'a [T],
}

#[derive(Serialize)]
struct AppendixSummary {
    eps: Vec<f64>,
    spreads: Vec<(String, f64)>,
}

fn read_f(spec: &str, mesh: &Mesh) -> Result<(Field, Option<FileRecord>)> {
    if let Some(e) = spec.strip_prefix("expr:") {
        let e = Expr::parse(e)?;
        return Ok((Field::interpolate(mesh, |x| e.eval(x)), None));
    }
    let text = fs::read_to_string(spec)?;
    let (f, hash) = Field::from_text(&text)?;
    if hash != mesh.content_hash() {
        return Err(invalid(format!("field file {spec} belongs to a different mesh")));
    }
    Ok((Field::new(mesh, f.values)?, Some(FileRecord { path: spec.into(), sha256: sha256_hex(text.as_bytes()) })))
}

fn pipeline(run: &mut Run) -> Result<()> {
    let cfg = run.cfg;
    let p = &cfg.params;
    match cfg.pipeline {
        Pipeline::VerifyProfile => {
            run.step("verify-profile", |out| {
                let r = verify_profile(&BlowupProfile { r_max: p.rmax, points: p.n })?;
                out.json("profile.json", "mtlab.profile", &r)
            })?;
            return Ok(());
        }
        Pipeline::Appendix if cfg.domain.is_none() => {
            let model = LocalModel::flat(p.a_p, 0.0);
            let (alpha, area) = (cfg.alpha, p.area);
            run.step("appendix", |out| write_appendix(out, &p.testfn_eps_grid, |eps| Ok(AppendixParams { eps, alpha, area, model })))?;
            return Ok(());
        }
        _ => {}
    }
    let sys = run.system()?;
    match cfg.pipeline {
        Pipeline::Eigen => {
            run.eigen(&sys, true)?;
        }
        Pipeline::Maximize => {
            let e = run.eigen(&sys, false)?;
            let params = SubcriticalParams { eps: p.eps, ..cfg.subcritical() };
            let r = run.step("maximize", |out| {
                let r = maximize_subcritical(&sys, &params, &e.eigenfield.values)?;
                out.json("maximize.json", "mtlab.maximize", &r)?;
                out.write("maximize_u.field", r.u_eps.to_text(&sys.space().mesh().content_hash()).as_bytes())?;
                Ok(r)
            })?;
            run.flag_unconverged(r.converged);
        }
        Pipeline::Sweep => {
            let e = run.eigen(&sys, false)?;
            let ok = run.step("sweep", |out| run_sweep(out, &sys, cfg, &e))?.1;
            run.flag_unconverged(ok);
        }
        Pipeline::Green => {
            run.check_alpha(&sys)?;
            run.green(&sys)?;
        }
        Pipeline::GreenSurvey => {
            run.check_alpha(&sys)?;
            run.step("green-survey", |out| {
                let s = bound_over_boundary(&sys, cfg.alpha, p.survey_samples, cfg.tolerances.linear)?;
                let rows: Vec<Vec<String>> = s
                    .entries
                    .iter()
                    .map(|e| vec![e.node_id.to_string(), num(e.x), num(e.y), num(e.a_p), num(e.bound_b)])
                    .collect();
                out.csv("green_survey.csv", &SURVEY_HEADER, &rows)?;
                out.json("green_survey.json", "mtlab.green-survey", &s)
            })?;
        }
        Pipeline::Testfn => {
            run.check_alpha(&sys)?;
            let g = run.green(&sys)?;
            run.step("testfn", |out| run_testfn(out, &sys, &g, &p.testfn_eps_grid).map(|_| ()))?;
        }
        Pipeline::Appendix => {
            run.check_alpha(&sys)?;
            let g = run.green(&sys)?;
            run.step("appendix", |out| {
                write_appendix(out, &p.testfn_eps_grid, |eps| Ok(build_test_function(&sys, &g, eps)?.appendix_params()))
            })?;
        }
        Pipeline::Meanfield => {
            run.check_alpha(&sys)?;
            let sp = sys.space();
            let (f, rec) = read_f(&p.f, sp.mesh())?;
            run.inputs.extend(rec);
            let problem = MeanFieldProblem::new(sp, cfg.alpha, p.rho, f)?;
            let c = run.step("corollary", |_| check_corollary(&sys, cfg.alpha, p.samples, cfg.seed))?;
            let sol = run.step("meanfield", |out| {
                let sol = minimize_f(&sys, &problem, cfg.tolerances.meanfield)?;
                let witness = coercivity_witness(&problem, &sol, c.c_emp);
                let summary = MeanFieldSummary {
                    alpha: cfg.alpha,
                    rho: p.rho,
                    f: &p.f,
                    mesh_sha256: sp.mesh().content_hash(),
                    solution: &sol,
                    c_emp: c.c_emp,
                    coercivity_ok: witness.iter().all(|w| *w),
                };
                out.json("meanfield.json", "mtlab.meanfield", &summary)?;
                out.write("meanfield_u.field", sol.u.to_text(&summary.mesh_sha256).as_bytes())?;
                Ok(sol)
            })?;
            run.flag_unconverged(sol.converged);
            if p.rho_sweep_steps > 0 {
                let ok = run.step("rho-sweep", |out| {
                    let sols = rho_sweep(&sys, &problem, p.rho, p.rho_sweep_steps, cfg.tolerances.meanfield)?;
                    let rows: Vec<Vec<String>> = sols
                        .iter()
                        .zip(1..)
                        .map(|(s, k)| {
                            let rho = p.rho.min(crate::meanfield::RHO_SWEEP_LIMIT) * k as f64 / p.rho_sweep_steps as f64;
                            vec![
                                num(rho),
                                num(s.f_value),
                                num(s.residual),
                                num(s.u_norm_1alpha),
                                s.iterations.to_string(),
                                s.converged.to_string(),
                            ]
                        })
                        .collect();
                    out.csv("meanfield_rho_sweep.csv", &RHO_SWEEP_HEADER, &rows)?;
                    Ok(sols.iter().all(|s| s.converged))
                })?;
                run.flag_unconverged(ok);
            }
        }
        Pipeline::Corollary => {
            run.check_alpha(&sys)?;
            let seeds: Vec<u64> = (0..p.seeds as u64).map(|k| cfg.seed.wrapping_add(k)).collect();
            run.step("corollary", |out| {
                let s = corollary_stability(&sys, cfg.alpha, p.samples, &seeds)?;
                out.json("corollary.json", "mtlab.corollary", &s)
            })?;
        }
        Pipeline::FullReport => {
            let e = run.eigen(&sys, true)?;
            let g = run.green(&sys)?;
            let (sweep, ok) = run.step("sweep", |out| run_sweep(out, &sys, cfg, &e))?;
            run.flag_unconverged(ok);
            let tf = run.step("testfn", |out| run_testfn(out, &sys, &g, &p.testfn_eps_grid))?;
            run.step("report", |out| {
                let mut rows: Vec<(f64, Option<f64>, Option<f64>)> = sweep.iter().map(|(e, c)| (*e, Some(*c), None)).collect();
                rows.extend(tf.iter().map(|(e, i)| (*e, None, Some(*i))));
                rows.sort_by(|a, b| b.0.total_cmp(&a.0));
                let table: Vec<Vec<String>> = rows
                    .iter()
                    .map(|(eps, c, i)| vec![num(*eps), opt_num(*c), num(g.bound_b), opt_num(*i), opt_num(i.map(|i| i - g.bound_b))])
                    .collect();
                out.csv("report.csv", &REPORT_HEADER, &table)
            })?;
        }
        Pipeline::VerifyProfile => unreachable!("handled above"),
    }
    Ok(())
}

/// Returns (eps, C_eps) pairs and whether every maximizer converged.
fn run_sweep(out: &mut Outputs, sys: &NeumannSystem, cfg: &ExperimentConfig, e: &EigenResult) -> Result<(Vec<(f64, f64)>, bool)> {
    let results = sweep(sys, &cfg.subcritical(), &cfg.params.eps_grid, &e.eigenfield.values)?;
    let diag = blowup_diagnostics(&results, sys.space())?;
    let rows: Vec<Vec<String>> = diag
        .entries
        .iter()
        .map(|d| {
            vec![
                num(d.eps),
                num(d.c_functional),
                num(d.lambda_eps),
                num(d.mu_eps),
                num(d.c_eps),
                num(d.r_eps),
                d.bound_ok.to_string(),
            ]
        })
        .collect();
    out.csv("sweep.csv", &SWEEP_HEADER, &rows)?;
    out.json("sweep_diagnostics.json", "mtlab.sweep-diagnostics", &diag)?;
    let pts: Vec<(f64, f64)> = results.iter().map(|r| (r.eps, r.c_functional)).collect();
    out.plots(&[Series::new("eps_vs_C_eps", "eps", "C_eps", pts.clone())])?;
    Ok((pts, results.iter().all(|r| r.converged)))
}

/// Returns (eps, integral) pairs.
fn run_testfn(out: &mut Outputs, sys: &NeumannSystem, g: &GreenResult, grid: &[f64]) -> Result<Vec<(f64, f64)>> {
    let reports = lower_bound_sweep(sys, g, grid)?;
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                num(r.eps),
                num(r.c2_numeric),
                num(r.c2_paper),
                num(r.a),
                num(r.norm_check),
                num(r.integral),
                num(r.bound_b),
                num(r.margin),
            ]
        })
        .collect();
    out.csv("testfn.csv", &TESTFN_HEADER, &rows)?;
    out.json("testfn.json", "mtlab.testfn", &Entries { entries: &reports })?;
    out.plots(&[Series::new("eps_vs_margin", "eps", "margin", reports.iter().map(|r| (r.eps, r.margin)).collect())])?;
    Ok(reports.iter().map(|r| (r.eps, r.integral)).collect())
}

fn write_appendix(out: &mut Outputs, grid: &[f64], params: impl Fn(f64) -> Result<AppendixParams>) -> Result<()> {
    let mut items = Vec::new();
    for &eps in grid {
        items.extend(appendix_integrals(&params(eps)?));
    }
    let rows: Vec<Vec<String>> = items
        .iter()
        .map(|i| {
            vec![
                num(i.eps),
                i.item.clone(),
                num(i.value),
                num(i.reference),
                num(i.abs_diff),
                num(i.scale),
                num(i.k),
                i.error.clone().unwrap_or_default().replace(',', ";"),
            ]
        })
        .collect();
    out.csv("appendix.csv", &APPENDIX_HEADER, &rows)?;
    let summary = AppendixSummary {
        eps: grid.to_vec(),
        spreads: APPENDIX_ITEMS.iter().map(|n| (n.to_string(), order_constant_spread(&items, n))).collect(),
    };
    out.json("appendix_summary.json", "mtlab.appendix", &summary)
}

/// Validates the config, runs its pipeline and writes `manifest.json`.
/// Pipeline failures are recorded in the manifest; the error return is
/// reserved for an unusable output directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunManifest> {
    let t = Instant::now();
    let mut manifest = RunManifest {
        schema_version: SCHEMA_VERSION,
        mtlab_version: env!("CARGO_PKG_VERSION").into(),
        pipeline: cfg.pipeline,
        config_sha256: cfg.hash(),
        inputs: Vec::new(),
        steps: Vec::new(),
        status: RunStatus::Ok,
        error: None,
        total_seconds: 0.0,
    };
    let result = match cfg.validate() {
        Err(e) => {
            // the manifest still records the rejection when the directory is usable
            if fs::create_dir_all(&cfg.output_dir).is_err() {
                return Err(e);
            }
            Err(e)
        }
        Ok(()) => {
            fs::create_dir_all(&cfg.output_dir)?;
            let mut run = Run { cfg, dir: cfg.output_dir.clone(), steps: Vec::new(), inputs: Vec::new(), unconverged: false };
            let r = pipeline(&mut run);
            manifest.steps = run.steps;
            manifest.inputs = run.inputs;
            if r.is_ok() && run.unconverged {
                manifest.status = RunStatus::NotConverged;
            }
            r
        }
    };
    if let Err(e) = result {
        manifest.status = RunStatus::of(&e);
        manifest.error = Some(e.to_string());
    }
    manifest.total_seconds = t.elapsed().as_secs_f64();
    let mut s = serde_json::to_string_pretty(&manifest).map_err(|e| invalid(e.to_string()))?;
    s.push('\n');
    fs::write(cfg.output_dir.join("manifest.json"), s)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_toml() {
        let mut c = ExperimentConfig::new(Pipeline::Sweep, "out", Some(DomainSource::Spec(DomainSpec::disk(1.0, 0.1))));
        c.params.p_hint = Some([1.0, 0.0]);
        let text = c.to_toml();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), c);
        let f = ExperimentConfig::new(Pipeline::Eigen, "o", Some(DomainSource::File { mesh: "a.mesh".into() }));
        assert_eq!(ExperimentConfig::from_toml(&f.to_toml()).unwrap(), f);
    }

    #[test]
    fn validation_catches_bad_ranges() {
        let d = Some(DomainSource::Spec(DomainSpec::unit_square(0.25)));
        let mut c = ExperimentConfig::new(Pipeline::Meanfield, "o", d.clone());
        c.params.rho = 4.0 * PI;
        assert!(c.validate().is_err());
        c.params.rho = 1.0;
        c.params.f = "expr:exp(".into();
        assert!(c.validate().is_err());
        let mut s = ExperimentConfig::new(Pipeline::Sweep, "o", d);
        s.params.eps_grid = vec![1.0, 2.0];
        assert!(s.validate().is_err());
        assert!(ExperimentConfig::new(Pipeline::Eigen, "o", None).validate().is_err());
    }

    #[test]
    fn svg_vertex_count() {
        let s = Series::new("t", "eps", "C", vec![(1.0, 2.0), (0.5, 3.0), (0.1, 3.5)]);
        let svg = s.to_svg();
        let pts = svg.split("points=\"").nth(1).unwrap().split('"').next().unwrap();
        assert_eq!(pts.split(' ').count(), 3);
        assert_eq!(Series::new("e", "a", "b", vec![]).to_csv(), "a,b\n");
    }
}
