mod common;

use std::f64::consts::PI;

use common::{gauss, simpson, system};
use mtlab::green::solve_green;
use mtlab::mesh::{pick_boundary_point, DomainSpec};
use mtlab::moser::{
    annulus_capacity, appendix_integrals, build_test_function, c2_paper, check_lower_bound, profile, verify_profile,
    AnnulusCapacitySpec, BlowupProfile,
};

#[test]
fn capacity_matches_log_oracle() {
    let spec = AnnulusCapacitySpec { delta: 1.0, rr_eps: 1e-3, s_eps: 0.0, i_eps: 1.0 };
    let r = annulus_capacity(&spec).unwrap();
    let oracle = 2.0 * PI / 1000f64.ln();
    assert!((oracle - 0.909_584).abs() < 1e-6);
    assert!((r.energy_quadrature - oracle).abs() < 1e-10);
    // same energy by Simpson in t = log r, where 2 pi r h'(r)^2 dr = 2 pi h_t^2 dt
    let l = 1000f64.ln();
    let by_t = simpson(|_| 2.0 * PI / (l * l), 1e-3f64.ln(), 0.0, 100);
    assert!((by_t - oracle).abs() < 1e-12);
}

#[test]
fn profile_mass_matches_closed_form() {
    // int_0^inf 2 pi r (1 + pi r^2 / 2)^-2 dr = 2, here by Gauss-Legendre in
    // s = r / (1 + r) on (0, 1)
    let mass: f64 = gauss(200, 0.0, 1.0)
        .iter()
        .map(|&(s, w)| {
            let r = s / (1.0 - s);
            let jac = 1.0 / (1.0 - s).powi(2);
            w * 2.0 * PI * r * (4.0 * PI * profile(r)).exp() * jac
        })
        .sum();
    assert!((mass - 2.0).abs() < 1e-9, "{mass}");
    let rep = verify_profile(&BlowupProfile::default()).unwrap();
    assert!((rep.mass - mass).abs() < 1e-8);
    assert_eq!(rep.phi0, 0.0);
}

#[test]
fn test_function_on_disk() {
    let sys = system(DomainSpec::disk(1.0, 1.0 / 32.0));
    let bp = pick_boundary_point(sys.space().mesh(), [1.0, 0.0]);
    let g = solve_green(&sys, 0.0, bp, 1e-12, None).unwrap();
    for eps in [1e-3, 1e-4, 1e-6] {
        let tf = build_test_function(&sys, &g, eps).unwrap();
        assert!((tf.norm_check - 1.0).abs() < 1e-10);
        assert!((tf.c2 - c2_paper(eps, g.a_p)).abs() / tf.c2 < 0.05);
        let rep = check_lower_bound(&sys, &g, &tf).unwrap();
        assert!(rep.margin > 0.0, "{rep:?}");
        let items = appendix_integrals(&tf.appendix_params());
        assert!(items[0].abs_diff < 1e-10, "{:?}", items[0]);
    }
}
