//! Subcritical extremal problem
//! `C_eps = sup { int exp((2 pi - eps) u^2) : int u = 0, ||u||_{1,alpha} <= 1 }`
//! on the P1 space, its Euler-Lagrange residual and blow-up diagnostics.

use std::f64::consts::{E, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{Field, FemSpace};
use crate::mesh::Point;
use crate::solver::NeumannSystem;
use crate::sparse::dot;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubcriticalParams {
    pub eps: f64,
    pub alpha: f64,
    pub restarts: usize,
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_max_iter() -> usize {
    5000
}

impl SubcriticalParams {
    pub fn new(eps: f64, alpha: f64) -> Self {
        Self { eps, alpha, restarts: 8, tol: 1e-8, max_iter: default_max_iter(), seed: 0 }
    }

    /// `2 pi - eps`.
    pub fn alpha_eps(&self) -> f64 {
        2.0 * PI - self.eps
    }

    /// eps = 2 pi is accepted as the flat limit alpha_eps = 0.
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps <= 2.0 * PI) {
            return Err(Error::InvalidParameter(format!("eps must lie in (0, 2 pi], got {}", self.eps)));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::InvalidParameter(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidParameter(format!("tol must be positive, got {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidParameter("max_iter must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub objective: f64,
    pub grad_norm: f64,
    pub step: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RestartOutcome {
    pub index: usize,
    pub kind: String,
    pub c_eps: f64,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct MaximizerResult {
    pub eps: f64,
    pub alpha: f64,
    pub alpha_eps: f64,
    #[serde(skip)]
    pub u_eps: Field,
    #[serde(rename = "C_eps")]
    pub c_functional: f64,
    pub lambda_eps: f64,
    pub mu_eps: f64,
    /// max u = max |u| after sign normalization.
    pub c_eps: f64,
    pub x_eps: Point,
    pub r_eps: f64,
    pub el_residual: f64,
    pub grad_norm: f64,
    pub converged: bool,
    /// alpha_eps = 0: every feasible u gives |Omega|.
    pub flat: bool,
    pub iterations: usize,
    pub best_restart: usize,
    /// Restarts whose C_eps is within 0.1% of the best.
    pub near_best: Vec<usize>,
    pub restarts: Vec<RestartOutcome>,
    pub trace: Vec<TraceEntry>,
}

/// Quantities of the Euler-Lagrange system at a feasible u.
struct Moments {
    objective: f64,
    /// Load vector of exp(alpha_eps u^2) u.
    load: Vec<f64>,
    lambda: f64,
    mu: f64,
}

fn moments(sp: &FemSpace, u: &[f64], alpha_eps: f64) -> Result<Moments> {
    sp.check_exponent(u, alpha_eps)?;
    let objective = sp.integrate_nodal(u, |v| (alpha_eps * v * v).exp());
    let load = sp.load_vector(u, |v| (alpha_eps * v * v).exp() * v);
    let lambda = dot(u, &load);
    let mu = load.iter().sum::<f64>() / sp.area();
    Ok(Moments { objective, load, lambda, mu })
}

/// Projects to mean zero and rescales to unit ||.||_{1,alpha}.
fn normalize(sp: &FemSpace, u: &[f64], alpha: f64) -> Result<Vec<f64>> {
    let v = sp.project_mean_zero(u);
    let n = sp.norm_1alpha(&v, alpha)?;
    if !(n > 0.0) {
        return Err(Error::InvalidParameter("start field has zero norm".into()));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// EL residual `||A u - b/lambda + (mu/lambda) m||_{M^-1} / ||u||_M`.
pub fn el_residual_of(sys: &NeumannSystem, u: &[f64], alpha: f64, alpha_eps: f64) -> Result<f64> {
    let sp = sys.space();
    sp.check_exponent(u, alpha_eps)?;
    // Deliberately not shared with the optimizer: separate quadrature calls.
    let b = sp.load_vector(u, |v| (alpha_eps * v * v).exp() * v);
    let lambda = sp.integrate_nodal(u, |v| (alpha_eps * v * v).exp() * v * v);
    if !(lambda > 0.0) {
        return Err(Error::InvalidParameter("lambda_eps = 0; the residual is undefined for u = 0".into()));
    }
    let mu = sp.integrate_nodal(u, |v| (alpha_eps * v * v).exp() * v) / sp.area();
    let au = sp.apply_alpha(u, alpha);
    let r: Vec<f64> =
        au.iter().zip(&b).zip(sp.weights()).map(|((a, b), m)| a - b / lambda + mu / lambda * m).collect();
    Ok(sys.minv_norm(&r) / sp.mass_norm_sq(u).sqrt())
}

/// Recomputes the EL residual of a stored result.
pub fn el_residual(result: &MaximizerResult, sys: &NeumannSystem) -> Result<f64> {
    el_residual_of(sys, &result.u_eps.values, result.alpha, result.alpha_eps)
}

struct Ascent {
    u: Vec<f64>,
    objective: f64,
    grad_norm: f64,
    converged: bool,
    iterations: usize,
    trace: Vec<TraceEntry>,
}

/// Projected gradient ascent on the unit sphere of ||.||_{1,alpha} in the
/// mean-zero space. The Riesz lift of the gradient through (K - alpha M) is
/// `2 alpha_eps d` with `d = A^{-1} Q b`; its tangential part is
/// proportional to `s = d / lambda - u`, and a unit step along s is the
/// normalized fixed-point map u -> d / ||d||.
fn ascend(sys: &NeumannSystem, start: &[f64], p: &SubcriticalParams) -> Result<Ascent> {
    let sp = sys.space();
    let ae = p.alpha_eps();
    let mut u = normalize(sp, start, p.alpha)?;
    let mut m = moments(sp, &u, ae)?;
    let mut trace = Vec::new();
    let solve_tol = (p.tol * 1e-3).clamp(1e-14, 1e-10);
    let mut best_grad = f64::INFINITY;
    let mut stalled = 0;
    for it in 0..p.max_iter {
        let (d, _) = sys.solve_alpha(&m.load, p.alpha, solve_tol)?;
        let s: Vec<f64> = d.iter().zip(&u).map(|(d, u)| d / m.lambda - u).collect();
        let as_ = sp.apply_alpha(&s, p.alpha);
        let s_norm_a = dot(&s, &as_).max(0.0).sqrt();
        let grad_norm = sys.minv_norm(&as_) / sp.mass_norm_sq(&u).sqrt();
        trace.push(TraceEntry { iteration: it, objective: m.objective, grad_norm, step: 0.0 });
        if grad_norm <= p.tol {
            return Ok(Ascent { u, objective: m.objective, grad_norm, converged: true, iterations: it, trace });
        }
        let (dir, slope) = match newton_direction(sys, &u, &m, p.alpha, ae, grad_norm.sqrt().clamp(1e-10, 1e-2)) {
            Some(v) => v,
            None => (s, 2.0 * ae * m.lambda * s_norm_a * s_norm_a),
        };
        // Once the predicted gain is below the rounding level of the
        // objective, Armijo cannot discriminate; the full step is taken and
        // progress is judged by the gradient instead.
        let rounding_regime = slope <= 256.0 * f64::EPSILON * m.objective;
        if rounding_regime {
            if grad_norm < best_grad {
                best_grad = grad_norm;
                stalled = 0;
            } else {
                stalled += 1;
                if stalled >= 8 {
                    return Ok(Ascent { u, objective: m.objective, grad_norm, converged: false, iterations: it, trace });
                }
            }
        }
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let trial: Vec<f64> = u.iter().zip(&dir).map(|(u, s)| u + t * s).collect();
            let trial = normalize(sp, &trial, p.alpha)?;
            match moments(sp, &trial, ae) {
                Ok(mut mt) => {
                    // increment computed directly so it keeps full relative precision
                    let gain = sp.integrate_pair(&u, &trial, |a, b| {
                        (ae * a * a).exp() * (ae * (b - a) * (b + a)).exp_m1()
                    });
                    if gain >= 1e-4 * t * slope || rounding_regime {
                        mt.objective = m.objective + gain;
                        accepted = Some((trial, mt));
                        break;
                    }
                    t *= 0.5;
                }
                Err(Error::Overflow { .. }) => t *= 0.5,
                Err(e) => return Err(e),
            }
        }
        match accepted {
            Some((nu, nm)) => {
                u = nu;
                m = nm;
                if let Some(last) = trace.last_mut() {
                    last.step = t;
                }
            }
            None => {
                return Ok(Ascent { u, objective: m.objective, grad_norm, converged: false, iterations: it, trace });
            }
        }
    }
    let (d, _) = sys.solve_alpha(&m.load, p.alpha, solve_tol)?;
    let s: Vec<f64> = d.iter().zip(&u).map(|(d, u)| d / m.lambda - u).collect();
    let grad_norm = sys.minv_norm(&sp.apply_alpha(&s, p.alpha)) / sp.mass_norm_sq(&u).sqrt();
    Ok(Ascent { u, objective: m.objective, grad_norm, converged: grad_norm <= p.tol, iterations: p.max_iter, trace })
}

/// Newton direction on the tangent space `{v : v^T A u = 0}` of the unit
/// sphere: `(lambda A - W) v = Q b - lambda A u` with W the mass matrix
/// weighted by `exp(a u^2)(1 + 2 a u^2)`, the second variation of the
/// objective divided by 2a. The operator is extended along u by
/// `lambda A u u^T A` so that it is definite on the whole mean-zero space;
/// the right-hand side has no u component, so the solution has none
/// either. Where the curvature is not that of a maximum, as near the
/// unstable orientations of a symmetric domain, `sigma A` is added with
/// growing sigma. Returns the direction and its slope.
fn newton_direction(
    sys: &NeumannSystem,
    u: &[f64],
    m: &Moments,
    alpha: f64,
    ae: f64,
    rel_tol: f64,
) -> Option<(Vec<f64>, f64)> {
    let sp = sys.space();
    let lambda = m.lambda;
    let au = sp.apply_alpha(u, alpha);
    let w = sp.weighted_mass(u, |v| (ae * v * v).exp() * (1.0 + 2.0 * ae * v * v));
    let r: Vec<f64> = m.load.iter().zip(&au).map(|(b, a)| b - lambda * a).collect();
    let rq = sp.project_dual(&r);
    for shift in [0.0, 1e-3, 1e-2, 1e-1, 1.0] {
        let diag = lambda * (1.0 + shift);
        let op = |v: &[f64]| {
            let c = dot(&au, v);
            let pv: Vec<f64> = v.iter().zip(u).map(|(v, u)| v - c * u).collect();
            let apv = sp.apply_alpha(&pv, alpha);
            let wpv = w.mul_vec(&pv);
            let y: Vec<f64> = apv.iter().zip(&wpv).map(|(a, w)| diag * a - w).collect();
            let cy = dot(u, &y);
            y.iter().zip(&au).map(|(y, a)| y + (lambda * c - cy) * a).collect()
        };
        let Ok((v, _)) = sys.pcg(op, &r, rel_tol) else { continue };
        let c = dot(&au, &v);
        let v: Vec<f64> = v.iter().zip(u).map(|(v, u)| v - c * u).collect();
        let slope = 2.0 * ae * dot(&rq, &v);
        if slope > 0.0 && slope.is_finite() {
            return Some((v, slope));
        }
    }
    None
}

/// Random start: a Gaussian bump at a random node plus smoothed noise.
pub fn random_start(sp: &FemSpace, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nodes = sp.mesh().nodes();
    let c = nodes[rng.random_range(0..nodes.len())];
    let diam = sp.area().sqrt();
    let w = diam * rng.random_range(0.1..0.4);
    let noise: Vec<f64> = (0..nodes.len()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let smooth = sp.mass().mul_vec(&noise);
    let smooth: Vec<f64> = smooth.iter().zip(sp.weights()).map(|(a, m)| a / m).collect();
    nodes
        .iter()
        .zip(&smooth)
        .map(|(x, z)| {
            let r2 = (x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2);
            (-0.5 * r2 / (w * w)).exp() + 0.05 * z
        })
        .collect()
}

fn finish(
    sys: &NeumannSystem,
    p: &SubcriticalParams,
    best: Ascent,
    best_restart: usize,
    outcomes: Vec<RestartOutcome>,
    flat: bool,
) -> Result<MaximizerResult> {
    let sp = sys.space();
    let ae = p.alpha_eps();
    let mut u = best.u;
    let (mx, mn) = u.iter().fold((f64::NEG_INFINITY, f64::INFINITY), |(a, b), &v| (a.max(v), b.min(v)));
    if mx < -mn {
        u.iter_mut().for_each(|v| *v = -*v);
    }
    let m = moments(sp, &u, ae)?;
    let (imax, c_eps) = u.iter().enumerate().fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
    let r_eps = m.lambda.sqrt() / c_eps * (-0.5 * ae * c_eps * c_eps).exp();
    let el = if flat { f64::NAN } else { el_residual_of(sys, &u, p.alpha, ae)? };
    let near_best = outcomes
        .iter()
        .filter(|o| o.c_eps >= m.objective * (1.0 - 1e-3))
        .map(|o| o.index)
        .collect();
    Ok(MaximizerResult {
        eps: p.eps,
        alpha: p.alpha,
        alpha_eps: ae,
        c_functional: m.objective,
        lambda_eps: m.lambda,
        mu_eps: m.mu,
        c_eps,
        x_eps: sp.mesh().nodes()[imax],
        r_eps,
        el_residual: el,
        grad_norm: best.grad_norm,
        converged: best.converged,
        flat,
        iterations: best.iterations,
        best_restart,
        near_best,
        restarts: outcomes,
        trace: best.trace,
        u_eps: Field { values: u },
    })
}

/// Best of the eigenfunction start, `restarts` random starts and any
/// extra starts (e.g. a warm start from a neighbouring eps). Restarts run
/// in parallel; the winner is the highest C_eps, ties by restart index.
pub fn maximize_with_starts(
    sys: &NeumannSystem,
    p: &SubcriticalParams,
    eigenfunction: &[f64],
    extra: &[Vec<f64>],
) -> Result<MaximizerResult> {
    p.validate()?;
    let sp = sys.space();
    let ae = p.alpha_eps();
    if ae <= 0.0 {
        let u = normalize(sp, eigenfunction, p.alpha)?;
        let asc = Ascent { u, objective: sp.area(), grad_norm: 0.0, converged: true, iterations: 0, trace: Vec::new() };
        let outcome = RestartOutcome { index: 0, kind: "eigenfunction".into(), c_eps: sp.area(), converged: true, iterations: 0 };
        return finish(sys, p, asc, 0, vec![outcome], true);
    }
    let mut starts: Vec<(String, Vec<f64>)> = vec![("eigenfunction".into(), eigenfunction.to_vec())];
    for k in 0..p.restarts {
        starts.push((format!("random-{k}"), random_start(sp, p.seed.wrapping_mul(1_000_003).wrapping_add(k as u64))));
    }
    for (k, s) in extra.iter().enumerate() {
        starts.push((format!("warm-{k}"), s.clone()));
    }
    let runs: Vec<Result<Ascent>> = starts.par_iter().map(|(_, s)| ascend(sys, s, p)).collect();
    let mut outcomes = Vec::with_capacity(runs.len());
    let mut best: Option<(usize, Ascent)> = None;
    let mut first_err = None;
    for (i, r) in runs.into_iter().enumerate() {
        match r {
            Ok(a) => {
                outcomes.push(RestartOutcome {
                    index: i,
                    kind: starts[i].0.clone(),
                    c_eps: a.objective,
                    converged: a.converged,
                    iterations: a.iterations,
                });
                if best.as_ref().is_none_or(|(_, b)| a.objective > b.objective) {
                    best = Some((i, a));
                }
            }
            Err(e) => {
                if first_err.is_none() {
                    first_err = Some(e);
                }
            }
        }
    }
    match best {
        Some((i, a)) => finish(sys, p, a, i, outcomes, false),
        None => Err(first_err.expect("at least one start")),
    }
}

pub fn maximize_subcritical(sys: &NeumannSystem, p: &SubcriticalParams, eigenfunction: &[f64]) -> Result<MaximizerResult> {
    maximize_with_starts(sys, p, eigenfunction, &[])
}

/// Maximizers along a strictly decreasing eps grid. Each eps is warm-started
/// from the previous maximizer, which makes C_eps non-decreasing.
pub fn sweep(
    sys: &NeumannSystem,
    base: &SubcriticalParams,
    eps_grid: &[f64],
    eigenfunction: &[f64],
) -> Result<Vec<MaximizerResult>> {
    check_decreasing(eps_grid)?;
    let mut out: Vec<MaximizerResult> = Vec::with_capacity(eps_grid.len());
    for &eps in eps_grid {
        let p = SubcriticalParams { eps, ..base.clone() };
        let extra: Vec<Vec<f64>> = out.last().map(|r| vec![r.u_eps.values.clone()]).unwrap_or_default();
        out.push(maximize_with_starts(sys, &p, eigenfunction, &extra)?);
    }
    Ok(out)
}

fn check_decreasing(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::InvalidParameter("eps grid is empty".into()));
    }
    if grid.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(Error::InvalidParameter("eps grid must be strictly decreasing".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct DiagnosticsEntry {
    pub eps: f64,
    #[serde(rename = "C_eps")]
    pub c_functional: f64,
    pub lambda_eps: f64,
    pub mu_eps: f64,
    pub c_eps: f64,
    pub r_eps: f64,
    /// |mu| <= e |Omega| + lambda.
    pub bound_ok: bool,
    /// |mu| <= exp(alpha_eps) + lambda / |Omega|, the form that follows from
    /// splitting {|u| < 1} and {|u| >= 1}.
    pub bound_rigorous_ok: bool,
    /// alpha_eps lambda >= C_eps - |Omega|.
    pub lambda_lower_ok: bool,
    pub x_eps: Point,
    pub dist_to_boundary: f64,
    pub energy_fraction_r010: f64,
    pub energy_fraction_r005: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DiagnosticsReport {
    pub entries: Vec<DiagnosticsEntry>,
    /// C_eps non-decreasing as eps decreases.
    pub monotone: bool,
    /// lambda at the smallest eps >= (C_smallest - |Omega|) / (2 pi).
    pub liminf_ok: bool,
}

pub fn blowup_diagnostics(results: &[MaximizerResult], sp: &FemSpace) -> Result<DiagnosticsReport> {
    let eps: Vec<f64> = results.iter().map(|r| r.eps).collect();
    check_decreasing(&eps)?;
    let area = sp.area();
    let entries: Vec<DiagnosticsEntry> = results
        .iter()
        .map(|r| {
            let u = &r.u_eps.values;
            let total = sp.energy(u);
            DiagnosticsEntry {
                eps: r.eps,
                c_functional: r.c_functional,
                lambda_eps: r.lambda_eps,
                mu_eps: r.mu_eps,
                c_eps: r.c_eps,
                r_eps: r.r_eps,
                bound_ok: r.mu_eps.abs() <= E * area + r.lambda_eps,
                bound_rigorous_ok: r.mu_eps.abs() <= r.alpha_eps.exp() + r.lambda_eps / area,
                lambda_lower_ok: r.alpha_eps * r.lambda_eps >= (r.c_functional - area) * (1.0 - 1e-12),
                x_eps: r.x_eps,
                dist_to_boundary: sp.mesh().distance_to_boundary(r.x_eps),
                energy_fraction_r010: sp.local_energy(u, r.x_eps, 0.1) / total,
                energy_fraction_r005: sp.local_energy(u, r.x_eps, 0.05) / total,
            }
        })
        .collect();
    let monotone = results.windows(2).all(|w| w[1].c_functional >= w[0].c_functional * (1.0 - 1e-12));
    let last = results.last().expect("non-empty");
    let liminf_ok = last.lambda_eps >= (last.c_functional - area) / (2.0 * PI) * (1.0 - 1e-12);
    Ok(DiagnosticsReport { entries, monotone, liminf_ok })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_mesh, DomainSpec};
    use crate::spectral::neumann_lambda1;

    fn setup(h: f64) -> (NeumannSystem, Vec<f64>) {
        let sys = NeumannSystem::new(FemSpace::new(build_mesh(&DomainSpec::unit_square(h)).unwrap()).unwrap()).unwrap();
        let e = neumann_lambda1(&sys, 1e-10).unwrap();
        (sys, e.eigenfield.values)
    }

    #[test]
    fn flat_objective_at_eps_two_pi() {
        let (sys, phi) = setup(0.25);
        let r = maximize_subcritical(&sys, &SubcriticalParams::new(2.0 * PI, 0.0), &phi).unwrap();
        assert!(r.flat);
        assert!((r.c_functional - 1.0).abs() < 1e-12);
    }

    #[test]
    fn converged_result_is_feasible_and_stationary() {
        let (sys, phi) = setup(0.125);
        let mut p = SubcriticalParams::new(3.0, 1.0);
        p.restarts = 2;
        let r = maximize_subcritical(&sys, &p, &phi).unwrap();
        assert!(r.converged);
        let sp = sys.space();
        assert!(sp.integral(&r.u_eps.values).abs() < 1e-12);
        assert!((sp.norm_1alpha(&r.u_eps.values, 1.0).unwrap() - 1.0).abs() < 1e-10);
        assert!(el_residual(&r, &sys).unwrap() <= 10.0 * p.tol);
        assert!(r.c_functional >= sp.area());
        let max_u = r.u_eps.values.iter().cloned().fold(f64::MIN, f64::max);
        let min_u = r.u_eps.values.iter().cloned().fold(f64::MAX, f64::min);
        assert!(max_u >= -min_u);
        assert!(r.trace.windows(2).all(|w| w[1].objective >= w[0].objective - 1e-13 * w[0].objective));
    }

    #[test]
    fn zero_field_has_no_residual() {
        let (sys, _) = setup(0.25);
        let zero = vec![0.0; sys.space().n()];
        assert!(el_residual_of(&sys, &zero, 0.0, 1.0).is_err());
    }

    #[test]
    fn non_decreasing_grid_is_rejected() {
        let (sys, phi) = setup(0.25);
        let p = SubcriticalParams::new(1.0, 0.0);
        assert!(sweep(&sys, &p, &[1.0, 2.0], &phi).is_err());
        assert!(sweep(&sys, &p, &[1.0, 1.0], &phi).is_err());
    }
}
