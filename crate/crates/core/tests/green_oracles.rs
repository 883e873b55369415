mod common;

use common::{disk_green_constant, system};
use mtlab::green::{solve_green, theorem_bound};
use mtlab::mesh::{pick_boundary_point, DomainSpec};

#[test]
fn image_formula_constant() {
    let c = disk_green_constant();
    assert!((c - 1.0 / (8.0 * std::f64::consts::PI)).abs() < 1e-12, "{c}");
}

#[test]
fn disk_a_p_approaches_image_formula() {
    let want = disk_green_constant();
    let mut errs = Vec::new();
    for h in [1.0 / 16.0, 1.0 / 32.0, 1.0 / 64.0] {
        let sys = system(DomainSpec::disk(1.0, h));
        let bp = pick_boundary_point(sys.space().mesh(), [1.0, 0.0]);
        let g = solve_green(&sys, 0.0, bp, 1e-12, None).unwrap();
        assert!(g.mean_residual < 1e-10);
        assert!((g.bound_b - theorem_bound(sys.space().area(), g.a_p)).abs() < 1e-12);
        errs.push((g.a_p - want).abs() / want);
    }
    assert!(errs.windows(2).all(|w| w[1] < w[0]), "{errs:?}");
    assert!(errs[2] < 0.05, "{errs:?}");
}

#[test]
fn alpha_shifts_the_constant_smoothly() {
    let sys = system(DomainSpec::disk(1.0, 1.0 / 32.0));
    let bp = pick_boundary_point(sys.space().mesh(), [0.0, 1.0]);
    let a: Vec<f64> = [0.0, 0.5, 1.0].iter().map(|&al| solve_green(&sys, al, bp, 1e-12, None).unwrap().a_p).collect();
    // G grows with alpha since K - alpha M becomes less coercive
    assert!(a[0] < a[1] && a[1] < a[2], "{a:?}");
}
