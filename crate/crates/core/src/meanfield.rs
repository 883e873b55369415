//! Neumann mean-field problem
//! `-Delta u - alpha u = rho (f e^u / int f e^u - 1/|Omega|)` by
//! minimization of `F(u) = 1/2 ||u||_{1,alpha}^2 - rho log int f e^u` over
//! mean-zero fields, and an empirical sampler for the constant of the
//! mean-zero Moser-Trudinger inequality
//! `log int e^u <= (1/8pi) ||u||_{1,alpha}^2 + |Omega|^{-1} int u + C`.
//!
//! f enters through the nodal interpolant of log f, so `f e^u` is
//! integrated as `exp(u_h + (log f)_h)`.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fem::{barycentric_gradients, Field, FemSpace, MAX_EXPONENT};
use crate::quad::triangle_rule7;
use crate::solver::{NeumannSystem, PcgFailure};
use crate::sparse::dot;

/// rho sweeps stop here; the existence argument needs rho < 4 pi.
pub const RHO_SWEEP_LIMIT: f64 = 0.98 * 4.0 * PI;

#[derive(Debug, Clone)]
pub struct MeanFieldProblem {
    pub alpha: f64,
    pub rho: f64,
    pub f: Field,
}

impl MeanFieldProblem {
    pub fn new(sp: &FemSpace, alpha: f64, rho: f64, f: Field) -> Result<Self> {
        let p = Self { alpha, rho, f };
        p.validate(sp)?;
        Ok(p)
    }

    pub fn validate(&self, sp: &FemSpace) -> Result<()> {
        if !(self.rho > 0.0 && self.rho < 4.0 * PI) {
            return Err(Error::InvalidParameter(format!(
                "rho must lie in (0, 4 pi) for coercivity, got {}",
                self.rho
            )));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::InvalidParameter(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        if self.f.values.len() != sp.n() {
            return Err(Error::InvalidParameter(format!(
                "f has {} values, mesh has {} nodes",
                self.f.values.len(),
                sp.n()
            )));
        }
        if let Some(i) = self.f.values.iter().position(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidParameter(format!("f must be positive at every node; f[{i}] = {}", self.f.values[i])));
        }
        Ok(())
    }

    fn log_f(&self) -> Vec<f64> {
        self.f.values.iter().map(|v| v.ln()).collect()
    }

    pub fn max_log_f(&self) -> f64 {
        self.f.values.iter().map(|v| v.ln()).fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepKind {
    Newton,
    Gradient,
}

#[derive(Debug, Clone, Serialize)]
pub struct MeanFieldTrace {
    pub iteration: usize,
    #[serde(rename = "F")]
    pub f_value: f64,
    pub grad_norm: f64,
    /// ||u||_{1,alpha}^2 at the iterate.
    pub norm_sq: f64,
    pub step: f64,
    pub kind: Option<StepKind>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MeanFieldSolution {
    #[serde(skip)]
    pub u: Field,
    #[serde(rename = "F_value")]
    pub f_value: f64,
    /// rho / |Omega|.
    pub mu: f64,
    pub residual: f64,
    pub grad_norm: f64,
    pub converged: bool,
    /// Line search failed before the tolerance was met.
    pub stagnated: bool,
    pub iterations: usize,
    pub newton_steps: usize,
    pub gradient_steps: usize,
    pub u_norm_1alpha: f64,
    pub u_max_abs: f64,
    pub trace: Vec<MeanFieldTrace>,
}

struct State {
    u: Vec<f64>,
    s: Vec<f64>,
    z: f64,
    b: Vec<f64>,
    f_value: f64,
    norm_sq: f64,
}

fn state(sp: &FemSpace, p: &MeanFieldProblem, log_f: &[f64], u: Vec<f64>) -> Result<State> {
    let s: Vec<f64> = u.iter().zip(log_f).map(|(a, b)| a + b).collect();
    if let Some(t) = sp.mesh().triangles().iter().position(|t| t.iter().any(|&i| s[i] > MAX_EXPONENT)) {
        let max_abs = s.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        return Err(Error::Overflow { triangle: t, exponent: max_abs, max_abs });
    }
    let b = sp.load_vector(&s, f64::exp);
    let z = b.iter().sum::<f64>();
    let norm_sq = sp.form_alpha(&u, p.alpha);
    let f_value = 0.5 * norm_sq - p.rho * z.ln();
    Ok(State { u, s, z, b, f_value, norm_sq })
}

/// `Q(A u - rho b / Z)`; summing the unprojected vector gives -rho, so the
/// projection adds exactly `(rho/|Omega|) m`.
fn gradient(sp: &FemSpace, p: &MeanFieldProblem, st: &State) -> Vec<f64> {
    let au = sp.apply_alpha(&st.u, p.alpha);
    let r: Vec<f64> = au.iter().zip(&st.b).map(|(a, b)| a - p.rho * b / st.z).collect();
    sp.project_dual(&r)
}

/// Damped Newton on the mean-zero subspace with a preconditioned gradient
/// step whenever the Hessian shows negative curvature.
pub fn minimize_f(sys: &NeumannSystem, p: &MeanFieldProblem, tol: f64) -> Result<MeanFieldSolution> {
    minimize_f_from(sys, p, tol, None)
}

pub fn minimize_f_from(sys: &NeumannSystem, p: &MeanFieldProblem, tol: f64, start: Option<&[f64]>) -> Result<MeanFieldSolution> {
    let sp = sys.space();
    p.validate(sp)?;
    if !(tol > 0.0) {
        return Err(Error::InvalidParameter(format!("tol must be positive, got {tol}")));
    }
    const MAX_ITER: usize = 200;
    let log_f = p.log_f();
    let u0 = match start {
        Some(u) => sp.project_mean_zero(u),
        None => vec![0.0; sp.n()],
    };
    let mut st = state(sp, p, &log_f, u0)?;
    let mut trace = Vec::new();
    let (mut newton_steps, mut gradient_steps) = (0, 0);
    let mut stagnated = false;
    let mut grad_norm;
    let mut it = 0;
    loop {
        let g = gradient(sp, p, &st);
        grad_norm = sys.minv_norm(&g);
        trace.push(MeanFieldTrace {
            iteration: it,
            f_value: st.f_value,
            grad_norm,
            norm_sq: st.norm_sq,
            step: 0.0,
            kind: None,
        });
        if grad_norm <= tol || it >= MAX_ITER {
            break;
        }
        let w = sp.weighted_mass(&st.s, f64::exp);
        let (rho, z) = (p.rho, st.z);
        let hess = |v: &[f64]| {
            let mut hv = sp.apply_alpha(v, p.alpha);
            let wv = w.mul_vec(v);
            let bv = dot(&st.b, v);
            for i in 0..hv.len() {
                hv[i] += -rho * wv[i] / z + rho * st.b[i] * bv / (z * z);
            }
            hv
        };
        let minus_g: Vec<f64> = g.iter().map(|v| -v).collect();
        let newton = match sys.pcg(hess, &minus_g, 1e-12) {
            Ok((d, _)) if dot(&g, &d) < 0.0 => Some(d),
            Ok(_) | Err(PcgFailure::NegativeCurvature { .. }) => None,
            Err(PcgFailure::MaxIterations { iterations, residual }) => {
                return Err(Error::NotConverged { what: "Newton system".into(), iterations, residual });
            }
        };
        let (d, kind) = match newton {
            Some(d) => (d, StepKind::Newton),
            None => (sys.apply_kplus(&minus_g), StepKind::Gradient),
        };
        let slope = dot(&g, &d);
        // below this the change in F is lost in rounding; progress is then
        // judged by the gradient alone
        let rounding = slope.abs() <= 256.0 * f64::EPSILON * st.f_value.abs().max(1.0);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let trial: Vec<f64> = st.u.iter().zip(&d).map(|(u, d)| u + t * d).collect();
            match state(sp, p, &log_f, sp.project_mean_zero(&trial)) {
                Ok(ns) if ns.f_value <= st.f_value + 1e-4 * t * slope || rounding => {
                    accepted = Some(ns);
                    break;
                }
                Ok(_) | Err(Error::Overflow { .. }) => t *= 0.5,
                Err(e) => return Err(e),
            }
        }
        let Some(ns) = accepted else {
            stagnated = true;
            break;
        };
        if let Some(last) = trace.last_mut() {
            last.step = t;
            last.kind = Some(kind);
        }
        match kind {
            StepKind::Newton => newton_steps += 1,
            StepKind::Gradient => gradient_steps += 1,
        }
        st = ns;
        it += 1;
    }
    let u = Field { values: st.u };
    let residual = residual_meanfield(sys, p, &u)?;
    Ok(MeanFieldSolution {
        f_value: st.f_value,
        mu: p.rho / sp.area(),
        residual,
        grad_norm,
        converged: grad_norm <= tol,
        stagnated,
        iterations: it,
        newton_steps,
        gradient_steps,
        u_norm_1alpha: st.norm_sq.max(0.0).sqrt(),
        u_max_abs: u.values.iter().fold(0.0f64, |m, v| m.max(v.abs())),
        u,
        trace,
    })
}

/// `||A u - rho b / int f e^u + mu m||_{M^-1}` with mu = rho/|Omega|. The
/// load vector is assembled here triangle by triangle, apart from the
/// optimizer's path.
pub fn residual_meanfield(sys: &NeumannSystem, p: &MeanFieldProblem, u: &Field) -> Result<f64> {
    let sp = sys.space();
    let mesh = sp.mesh();
    let rule = triangle_rule7();
    let mut b = vec![0.0; sp.n()];
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let area = mesh.triangle_area(t);
        for (l, w) in &rule {
            let mut s = 0.0;
            for k in 0..3 {
                s += l[k] * (u.values[tri[k]] + p.f.values[tri[k]].ln());
            }
            if s > MAX_EXPONENT {
                return Err(Error::Overflow { triangle: t, exponent: s, max_abs: s });
            }
            let e = s.exp();
            for k in 0..3 {
                b[tri[k]] += w * area * e * l[k];
            }
        }
    }
    let z: f64 = b.iter().sum();
    let mu = p.rho / sp.area();
    let au = sp.apply_alpha(&u.values, p.alpha);
    let r: Vec<f64> = au.iter().zip(&b).zip(sp.weights()).map(|((a, b), m)| a - p.rho * b / z + mu * m).collect();
    Ok(sys.minv_norm(&r))
}

/// Per-iterate check of
/// `F(u) >= (1 - rho/4pi) 1/2 ||u||^2 - rho C - rho max log f`.
pub fn coercivity_witness(p: &MeanFieldProblem, sol: &MeanFieldSolution, c_emp: f64) -> Vec<bool> {
    let lf = p.max_log_f();
    sol.trace
        .iter()
        .map(|e| e.f_value >= (1.0 - p.rho / (4.0 * PI)) * 0.5 * e.norm_sq - p.rho * c_emp - p.rho * lf)
        .collect()
}

/// rho grid from `rho_max / steps` up to `rho_max`, capped at 0.98 * 4 pi,
/// solved with warm starts.
pub fn rho_sweep(sys: &NeumannSystem, base: &MeanFieldProblem, rho_max: f64, steps: usize, tol: f64) -> Result<Vec<MeanFieldSolution>> {
    let top = rho_max.min(RHO_SWEEP_LIMIT);
    let mut out: Vec<MeanFieldSolution> = Vec::with_capacity(steps);
    for k in 1..=steps {
        let p = MeanFieldProblem { rho: top * k as f64 / steps as f64, ..base.clone() };
        let start = out.last().map(|s| s.u.values.clone());
        out.push(minimize_f_from(sys, &p, tol, start.as_deref())?);
    }
    Ok(out)
}

/// `D(u) = log int e^u - (1/8pi) int |grad u|^2 + (alpha/8pi) int u^2 - |Omega|^{-1} int u`.
pub fn corollary_d(sp: &FemSpace, u: &[f64], alpha: f64) -> Result<f64> {
    let max = u.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    if max > MAX_EXPONENT {
        let t = sp.mesh().triangles().iter().position(|t| t.iter().any(|&i| u[i] > MAX_EXPONENT)).unwrap_or(0);
        return Err(Error::Overflow { triangle: t, exponent: max, max_abs: max });
    }
    // shift by the max so the exponential never overflows
    let log_int = max + sp.integrate_nodal(u, |v| (v - max).exp()).ln();
    Ok(log_int - sp.energy(u) / (8.0 * PI) + alpha * sp.mass_norm_sq(u) / (8.0 * PI) - sp.mean(u))
}

#[derive(Debug, Clone, Serialize)]
pub struct CorollaryReport {
    pub seed: u64,
    pub samples: usize,
    #[serde(rename = "C_emp")]
    pub c_emp: f64,
    pub argmax: usize,
    pub mean_d: f64,
    pub min_d: f64,
    /// Samples that overflowed and were scaled down.
    pub rescaled: Vec<usize>,
    /// D of the argmax sample regenerated from its seed.
    pub recomputed_max: f64,
    pub drift: f64,
    pub violations: usize,
}

/// Sample k: Gaussian nodal values from stream k of the seeded generator,
/// smoothed as `(M z) / (M 1)`.
pub fn corollary_sample(sp: &FemSpace, seed: u64, k: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k as u64);
    let z: Vec<f64> = (0..sp.n()).map(|_| StandardNormal.sample(&mut rng)).collect();
    sp.mass().mul_vec(&z).iter().zip(sp.weights()).map(|(a, m)| a / m).collect()
}

fn sample_d(sp: &FemSpace, seed: u64, k: usize, alpha: f64) -> Result<(f64, bool)> {
    let mut u = corollary_sample(sp, seed, k);
    let mut rescaled = false;
    loop {
        match corollary_d(sp, &u, alpha) {
            Ok(d) => return Ok((d, rescaled)),
            Err(Error::Overflow { .. }) => {
                rescaled = true;
                u.iter_mut().for_each(|v| *v *= 0.5);
            }
            Err(e) => return Err(e),
        }
    }
}

pub fn check_corollary(sys: &NeumannSystem, alpha: f64, samples: usize, seed: u64) -> Result<CorollaryReport> {
    let sp = sys.space();
    if samples == 0 {
        return Err(Error::InvalidParameter("need at least one sample".into()));
    }
    if !(alpha >= 0.0) {
        return Err(Error::InvalidParameter(format!("alpha must be non-negative, got {alpha}")));
    }
    let ds: Vec<(f64, bool)> = (0..samples).into_par_iter().map(|k| sample_d(sp, seed, k, alpha)).collect::<Result<_>>()?;
    let (argmax, c_emp) = ds.iter().enumerate().fold((0, f64::NEG_INFINITY), |acc, (i, d)| if d.0 > acc.1 { (i, d.0) } else { acc });
    let (recomputed_max, _) = sample_d(sp, seed, argmax, alpha)?;
    Ok(CorollaryReport {
        seed,
        samples,
        c_emp,
        argmax,
        mean_d: ds.iter().map(|d| d.0).sum::<f64>() / samples as f64,
        min_d: ds.iter().map(|d| d.0).fold(f64::INFINITY, f64::min),
        rescaled: ds.iter().enumerate().filter(|(_, d)| d.1).map(|(i, _)| i).collect(),
        recomputed_max,
        drift: (recomputed_max - c_emp).abs(),
        violations: ds.iter().filter(|d| d.0 > c_emp + 1e-12).count(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CorollaryStability {
    #[serde(rename = "C_emp")]
    pub c_emp: f64,
    pub per_seed: Vec<CorollaryReport>,
    /// (max - min) / |mean| of C_emp over the seeds.
    pub relative_spread: f64,
}

pub fn corollary_stability(sys: &NeumannSystem, alpha: f64, samples: usize, seeds: &[u64]) -> Result<CorollaryStability> {
    let per_seed: Vec<CorollaryReport> = seeds.iter().map(|&s| check_corollary(sys, alpha, samples, s)).collect::<Result<_>>()?;
    let cs: Vec<f64> = per_seed.iter().map(|r| r.c_emp).collect();
    let max = cs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = cs.iter().cloned().fold(f64::INFINITY, f64::min);
    let mean = cs.iter().sum::<f64>() / cs.len() as f64;
    Ok(CorollaryStability { c_emp: max, per_seed, relative_spread: (max - min) / mean.abs() })
}

/// Sanity helper: gradient of a P1 field on one triangle.
pub fn triangle_gradient(sp: &FemSpace, u: &[f64], t: usize) -> [f64; 2] {
    let tri = sp.mesh().triangles()[t];
    let g = barycentric_gradients(sp.mesh().triangle_points(t));
    let mut out = [0.0; 2];
    for k in 0..3 {
        out[0] += u[tri[k]] * g[k][0];
        out[1] += u[tri[k]] * g[k][1];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_mesh, DomainSpec};

    fn system(h: f64) -> NeumannSystem {
        NeumannSystem::new(FemSpace::new(build_mesh(&DomainSpec::unit_square(h)).unwrap()).unwrap()).unwrap()
    }

    #[test]
    fn constant_f_gives_zero_solution() {
        let sys = system(0.125);
        let sp = sys.space();
        let p = MeanFieldProblem::new(sp, 0.0, 5.0, Field { values: vec![1.0; sp.n()] }).unwrap();
        let s = minimize_f(&sys, &p, 1e-10).unwrap();
        assert!(s.converged && s.iterations == 0);
        assert!(s.residual < 1e-12);
        assert_eq!(s.mu, 5.0);
    }

    #[test]
    fn invalid_problems_are_rejected() {
        let sys = system(0.25);
        let sp = sys.space();
        let one = Field { values: vec![1.0; sp.n()] };
        assert!(MeanFieldProblem::new(sp, 0.0, 4.0 * PI, one.clone()).is_err());
        assert!(MeanFieldProblem::new(sp, 0.0, -1.0, one.clone()).is_err());
        let mut neg = one.clone();
        neg.values[3] = 0.0;
        assert!(MeanFieldProblem::new(sp, 0.0, 1.0, neg).is_err());
    }

    #[test]
    fn nonconstant_f_converges_and_decreases() {
        let sys = system(0.125);
        let sp = sys.space();
        let f = Field::interpolate(sp.mesh(), |x| (2.0 * x[0] - x[1]).exp());
        let p = MeanFieldProblem::new(sp, 2.0, 8.0, f).unwrap();
        let s = minimize_f(&sys, &p, 1e-10).unwrap();
        assert!(s.converged, "{s:?}");
        assert!(s.residual <= 1e-9);
        assert!(sp.integral(&s.u.values).abs() < 1e-12);
        assert!(s.trace.windows(2).all(|w| w[1].f_value <= w[0].f_value + 1e-13 * w[0].f_value.abs()));
    }

    #[test]
    fn constant_field_d_is_log_area() {
        let sys = system(0.25);
        let sp = sys.space();
        for c in [0.0, 1.5, -3.0] {
            let d = corollary_d(sp, &vec![c; sp.n()], 0.7).unwrap();
            let want = sp.area().ln() + 0.7 * c * c * sp.area() / (8.0 * PI);
            assert!((d - want).abs() < 1e-13, "{d} {want}");
        }
    }

    #[test]
    fn corollary_report_is_consistent() {
        let sys = system(0.125);
        let r = check_corollary(&sys, 0.0, 64, 7).unwrap();
        assert_eq!(r.violations, 0);
        assert!(r.drift <= 1e-12);
        assert!(r.min_d <= r.mean_d && r.mean_d <= r.c_emp);
    }
}
