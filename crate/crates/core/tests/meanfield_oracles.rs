mod common;

use std::f64::consts::PI;

use common::{picard_meanfield, system};
use mtlab::fem::Field;
use mtlab::meanfield::{corollary_d, minimize_f, residual_meanfield, MeanFieldProblem};
use mtlab::mesh::DomainSpec;
use mtlab::spectral::neumann_eigenpairs;

#[test]
fn newton_matches_picard_on_disk() {
    let sys = system(DomainSpec::disk(1.0, 1.0 / 16.0));
    let sp = sys.space();
    let f = Field::interpolate(sp.mesh(), |x| x[0].exp());
    let p = MeanFieldProblem::new(sp, 1.0, PI, f.clone()).unwrap();
    let s = minimize_f(&sys, &p, 1e-11).unwrap();
    assert!(s.converged);
    let log_f: Vec<f64> = f.values.iter().map(|v| v.ln()).collect();
    let oracle = picard_meanfield(&sys, 1.0, PI, &log_f, 0.3, 1e-13);
    let d: Vec<f64> = s.u.values.iter().zip(&oracle).map(|(a, b)| a - b).collect();
    let l2 = sp.mass_norm_sq(&d).sqrt();
    assert!(l2 < 1e-6, "{l2}");
    assert_eq!(s.mu, PI / sp.area());
}

#[test]
fn doubling_f_shifts_energy_only() {
    let sys = system(DomainSpec::unit_square(1.0 / 16.0));
    let sp = sys.space();
    let f = Field::interpolate(sp.mesh(), |x| 1.0 + x[0] * x[1]);
    let f2 = Field { values: f.values.iter().map(|v| 2.0 * v).collect() };
    let rho = 6.0;
    let a = minimize_f(&sys, &MeanFieldProblem::new(sp, 0.0, rho, f).unwrap(), 1e-11).unwrap();
    let b = minimize_f(&sys, &MeanFieldProblem::new(sp, 0.0, rho, f2).unwrap(), 1e-11).unwrap();
    assert!((b.f_value - a.f_value + rho * 2f64.ln()).abs() < 1e-10);
    let d = a.u.values.iter().zip(&b.u.values).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(d < 1e-9, "{d}");
}

#[test]
fn perturbing_the_solution_raises_the_residual() {
    let sys = system(DomainSpec::unit_square(1.0 / 16.0));
    let sp = sys.space();
    let f = Field::interpolate(sp.mesh(), |x| (x[0] - x[1]).exp());
    let p = MeanFieldProblem::new(sp, 2.0, 5.0, f).unwrap();
    let s = minimize_f(&sys, &p, 1e-11).unwrap();
    let r0 = residual_meanfield(&sys, &p, &s.u).unwrap();
    assert!(r0 < 1e-9);
    let phi = &neumann_eigenpairs(&sys, 1, 1e-10).unwrap()[0].vector;
    let pert = Field { values: s.u.values.iter().zip(phi).map(|(u, v)| u + 0.1 * v).collect() };
    assert!(residual_meanfield(&sys, &p, &pert).unwrap() > r0 + 1e-3);
}

#[test]
fn corollary_d_is_continuous_at_zero() {
    let sys = system(DomainSpec::unit_square(1.0 / 16.0));
    let sp = sys.space();
    let u = Field::interpolate(sp.mesh(), |x| (3.0 * x[0]).sin() + x[1] * x[1]).values;
    let target = sp.area().ln();
    let mut prev = f64::INFINITY;
    for t in [1.0, 0.1, 0.01, 0.001] {
        let v: Vec<f64> = u.iter().map(|x| t * x).collect();
        let gap = (corollary_d(sp, &v, 0.0).unwrap() - target).abs();
        assert!(gap < prev);
        prev = gap;
    }
    assert!(prev < 1e-3);
}
