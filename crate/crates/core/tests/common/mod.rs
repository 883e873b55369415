//! Independent reference computations for the integration and acceptance
//! tests. Nothing here calls the code path it is used to check.
#![allow(dead_code)]

use std::f64::consts::PI;

use mtlab::fem::FemSpace;
use mtlab::mesh::{build_mesh, DomainSpec};
use mtlab::solver::NeumannSystem;
use mtlab::spectral::neumann_eigenpairs;

pub fn system(spec: DomainSpec) -> NeumannSystem {
    NeumannSystem::new(FemSpace::new(build_mesh(&spec).unwrap()).unwrap()).unwrap()
}

/// Bessel J_n by the trapezoid rule on `(1/pi) int_0^pi cos(n t - x sin t) dt`,
/// which converges geometrically for this periodic integrand.
pub fn bessel_j(n: i32, x: f64) -> f64 {
    let m = 400;
    let h = PI / m as f64;
    let mut s = 0.5 * (1.0 + (n as f64 * PI - 0.0).cos());
    for k in 1..m {
        let t = k as f64 * h;
        s += (n as f64 * t - x * t.sin()).cos();
    }
    s * h / PI
}

/// First positive root of J1' by bisection; J1' = (J0 - J2) / 2.
pub fn j1_prime_root() -> f64 {
    let d = |x: f64| 0.5 * (bessel_j(0, x) - bessel_j(2, x));
    let (mut a, mut b) = (1.0, 3.0);
    assert!(d(a) > 0.0 && d(b) < 0.0);
    for _ in 0..100 {
        let m = 0.5 * (a + b);
        if d(m) > 0.0 {
            a = m;
        } else {
            b = m;
        }
    }
    0.5 * (a + b)
}

/// Gauss-Legendre nodes and weights on [a, b] by Newton on P_n.
pub fn gauss(n: usize, a: f64, b: f64) -> Vec<(f64, f64)> {
    (0..n)
        .map(|i| {
            let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0, x);
                for k in 2..=n {
                    let k = k as f64;
                    let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
                    p0 = p1;
                    p1 = p2;
                }
                dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                let dx = p1 / dp;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            (0.5 * (a + b) + 0.5 * (b - a) * x, 0.5 * (b - a) * w)
        })
        .collect()
}

/// A_p for the unit disk and p = (1, 0). The Neumann Green function is
/// `-(1/pi) log|x - p| + |x|^2/(4 pi) + c` by the image construction;
/// c fixes the mean to zero. In polar coordinates about p the log
/// integral has the closed inner form `L^2/2 log L - L^2/4` with chord
/// length `L = -2 cos(phi)`.
pub fn disk_green_constant() -> f64 {
    let log_int: f64 = gauss(200, PI / 2.0, 1.5 * PI)
        .iter()
        .map(|&(phi, w)| {
            let l = -2.0 * phi.cos();
            w * (0.5 * l * l * l.ln() - 0.25 * l * l)
        })
        .sum();
    let sq_int = PI / 2.0;
    let c = -(-log_int / PI + sq_int / (4.0 * PI)) / PI;
    1.0 / (4.0 * PI) + c
}

/// Composite Simpson on [a, b] with n (even) panels.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for k in 1..n {
        s += if k % 2 == 1 { 4.0 } else { 2.0 } * f(a + k as f64 * h);
    }
    s * h / 3.0
}

/// Picard iteration `u <- (1 - w) u + w (K - alpha M)^{-1} rho (b/Z - m/|Omega|)`
/// for the mean-field equation with f given by nodal log values.
pub fn picard_meanfield(sys: &NeumannSystem, alpha: f64, rho: f64, log_f: &[f64], relax: f64, tol: f64) -> Vec<f64> {
    let sp = sys.space();
    let mut u = vec![0.0; sp.n()];
    for _ in 0..2000 {
        let s: Vec<f64> = u.iter().zip(log_f).map(|(a, b)| a + b).collect();
        let b = sp.load_vector(&s, f64::exp);
        let z: f64 = b.iter().sum();
        let rhs: Vec<f64> = b.iter().zip(sp.weights()).map(|(b, m)| rho * (b / z - m / sp.area())).collect();
        let (t, _) = sys.solve_alpha(&rhs, alpha, 1e-14).unwrap();
        let next: Vec<f64> = u.iter().zip(&t).map(|(u, t)| (1.0 - relax) * u + relax * t).collect();
        let diff: Vec<f64> = next.iter().zip(&u).map(|(a, b)| a - b).collect();
        u = next;
        if sp.mass_norm_sq(&diff).sqrt() < tol {
            return u;
        }
    }
    panic!("Picard iteration did not converge");
}

/// Largest `int exp(a u^2)` over unit-norm u in the span of the first
/// `modes` Neumann eigenfunctions, by many-start ascent on the sphere of
/// coefficients. With M-orthonormal eigenvectors,
/// `u = sum c_i phi_i / sqrt(lambda_i - alpha)` has norm |c|.
pub fn span_maximum(sys: &NeumannSystem, alpha: f64, a: f64, modes: usize, starts: usize) -> f64 {
    let sp = sys.space();
    let pairs = neumann_eigenpairs(sys, modes, 1e-12).unwrap();
    let basis: Vec<Vec<f64>> = pairs
        .iter()
        .map(|p| {
            let s = (p.value - alpha).sqrt();
            p.vector.iter().map(|v| v / s).collect()
        })
        .collect();
    let field = |c: &[f64]| -> Vec<f64> {
        let mut u = vec![0.0; sp.n()];
        for (ci, b) in c.iter().zip(&basis) {
            for (u, b) in u.iter_mut().zip(b) {
                *u += ci * b;
            }
        }
        u
    };
    let j = |c: &[f64]| -> f64 {
        let u = field(c);
        sp.integrate_nodal(&u, |v| (a * v * v).exp())
    };
    let unit = |c: Vec<f64>| -> Vec<f64> {
        let n = c.iter().map(|x| x * x).sum::<f64>().sqrt();
        c.into_iter().map(|x| x / n).collect()
    };
    // deterministic scrambled starts plus the coordinate axes
    let mut state = 0x9E3779B97F4A7C15u64;
    let mut rnd = || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    };
    let mut starts_v: Vec<Vec<f64>> = (0..modes)
        .map(|i| {
            let mut c = vec![0.0; modes];
            c[i] = 1.0;
            c
        })
        .collect();
    for _ in 0..starts {
        starts_v.push(unit((0..modes).map(|_| rnd()).collect()));
    }
    let mut best = f64::NEG_INFINITY;
    for mut c in starts_v {
        let mut val = j(&c);
        let mut step = 0.1;
        for _ in 0..400 {
            let u = field(&c);
            let load = sp.load_vector(&u, |v| (a * v * v).exp() * 2.0 * a * v);
            let g: Vec<f64> = basis.iter().map(|b| b.iter().zip(&load).map(|(x, y)| x * y).sum()).collect();
            let radial: f64 = g.iter().zip(&c).map(|(g, c)| g * c).sum();
            let tg: Vec<f64> = g.iter().zip(&c).map(|(g, c)| g - radial * c).collect();
            let tn = tg.iter().map(|x| x * x).sum::<f64>().sqrt();
            if tn < 1e-9 * val {
                break;
            }
            loop {
                let trial = unit(c.iter().zip(&tg).map(|(c, g)| c + step * g / tn).collect());
                let tv = j(&trial);
                if tv > val {
                    c = trial;
                    val = tv;
                    step *= 1.5;
                    break;
                }
                step *= 0.25;
                if step < 1e-12 {
                    break;
                }
            }
            if step < 1e-12 {
                break;
            }
        }
        best = best.max(val);
    }
    best
}
