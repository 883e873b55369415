mod common;

use std::f64::consts::PI;

use common::{simpson, span_maximum, system};
use mtlab::fem::Field;
use mtlab::mesh::DomainSpec;
use mtlab::spectral::neumann_lambda1;
use mtlab::subcritical::{el_residual, maximize_subcritical, SubcriticalParams};

#[test]
fn exponential_integral_matches_1d_oracle() {
    let want = simpson(|x| ((x - 0.5) * (x - 0.5)).exp(), 0.0, 1.0, 2000);
    assert!((want - 1.089_974_208_367).abs() < 1e-10, "{want}");
    let sys = system(DomainSpec::unit_square(1.0 / 64.0));
    let sp = sys.space();
    let u = Field::interpolate(sp.mesh(), |x| x[0] - 0.5).values;
    let got = sp.functional_exp(&u, 1.0).unwrap();
    assert!((got - want).abs() / want < 1e-4, "{got} vs {want}");
}

#[test]
fn maximizer_beats_and_matches_six_mode_span() {
    let sys = system(DomainSpec::unit_square(1.0 / 8.0));
    let e = neumann_lambda1(&sys, 1e-12).unwrap();
    let p = SubcriticalParams::new(5.0, 0.0);
    let r = maximize_subcritical(&sys, &p, &e.eigenfield.values).unwrap();
    assert!(r.converged);
    let oracle = span_maximum(&sys, 0.0, 2.0 * PI - 5.0, 6, 40);
    let rel = (r.c_functional - oracle) / oracle;
    assert!(rel > -1e-9, "maximizer below the span optimum: {} < {oracle}", r.c_functional);
    assert!(rel < 5e-3, "{} vs {oracle}", r.c_functional);
    assert!(el_residual(&r, &sys).unwrap() < 1e-6);
}

#[test]
fn maximizer_is_feasible() {
    let sys = system(DomainSpec::disk(1.0, 1.0 / 16.0));
    let sp = sys.space();
    let e = neumann_lambda1(&sys, 1e-12).unwrap();
    let alpha = 0.5 * e.lambda1;
    let r = maximize_subcritical(&sys, &SubcriticalParams::new(1.0, alpha), &e.eigenfield.values).unwrap();
    let u = &r.u_eps.values;
    assert!(sp.integral(u).abs() < 1e-12);
    assert!((sp.norm_1alpha(u, alpha).unwrap() - 1.0).abs() < 1e-10);
    assert!(r.mu_eps.abs() <= std::f64::consts::E * sp.area() + r.lambda_eps);
}
