//! Linear solves on the mean-zero subspace.
//!
//! The singular Neumann stiffness matrix is handled by factoring K with one
//! row and column removed. For a right-hand side orthogonal to constants
//! the removed equation is implied by the others, so the pinned solve
//! followed by mean-zero projection is the exact pseudo-inverse action.

use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::fem::FemSpace;
use crate::sparse::{dot, ProfileCholesky};

#[derive(Debug, Clone)]
pub struct NeumannSystem {
    space: FemSpace,
    k_factor: ProfileCholesky,
    /// Factored on first use; only dual norms need it.
    m_factor: OnceLock<ProfileCholesky>,
}

/// Outcome of an iterative solve on the mean-zero subspace.
#[derive(Debug, Clone)]
pub struct SolveInfo {
    pub iterations: usize,
    pub relative_residual: f64,
}

impl NeumannSystem {
    pub fn new(space: FemSpace) -> Result<Self> {
        let k_factor = ProfileCholesky::factor_excluding(space.stiffness(), &[0])?;
        Ok(Self { space, k_factor, m_factor: OnceLock::new() })
    }

    pub fn space(&self) -> &FemSpace {
        &self.space
    }

    /// Mean-zero solution x of K x = Q r, where Q removes the constant
    /// component of the dual vector r.
    pub fn apply_kplus(&self, r: &[f64]) -> Vec<f64> {
        let rhs = self.space.project_dual(r);
        let x = self.k_factor.solve(&rhs);
        self.space.project_mean_zero(&x)
    }

    /// M^{-1} r.
    pub fn apply_minv(&self, r: &[f64]) -> Vec<f64> {
        self.m_factor
            .get_or_init(|| ProfileCholesky::factor(self.space.mass()).expect("mass matrix is positive definite"))
            .solve(r)
    }

    /// Dual norm sqrt(r^T M^{-1} r).
    pub fn minv_norm(&self, r: &[f64]) -> f64 {
        dot(r, &self.apply_minv(r)).max(0.0).sqrt()
    }

    /// Mean-zero solution of (K - alpha M) x = Q b. Preconditioned conjugate
    /// gradients with K^+ as preconditioner; alpha = 0 is a direct solve.
    /// A non-positive curvature direction means alpha is not below the
    /// first Neumann eigenvalue.
    pub fn solve_alpha(&self, b: &[f64], alpha: f64, rel_tol: f64) -> Result<(Vec<f64>, SolveInfo)> {
        if alpha == 0.0 {
            return Ok((self.apply_kplus(b), SolveInfo { iterations: 0, relative_residual: 0.0 }));
        }
        match self.pcg(|p| self.space.apply_alpha(p, alpha), b, rel_tol) {
            Ok(r) => Ok(r),
            Err(PcgFailure::NegativeCurvature { pq, pk }) => {
                Err(Error::AlphaNotAdmissible { alpha, lambda1: alpha * (1.0 - pq / pk).recip() })
            }
            Err(PcgFailure::MaxIterations { iterations, residual }) => Err(Error::NotConverged {
                what: "preconditioned CG for K - alpha M".into(),
                iterations,
                residual,
            }),
        }
    }

    /// Preconditioned CG on the mean-zero subspace for a symmetric operator,
    /// stopping at relative K^+-residual `rel_tol`.
    pub fn pcg(
        &self,
        apply: impl Fn(&[f64]) -> Vec<f64>,
        b: &[f64],
        rel_tol: f64,
    ) -> std::result::Result<(Vec<f64>, SolveInfo), PcgFailure> {
        let n = self.space.n();
        let mut x = vec![0.0; n];
        let mut r = self.space.project_dual(b);
        let mut z = self.apply_kplus(&r);
        let mut rz = dot(&r, &z);
        let rz0 = rz;
        if rz0 <= 0.0 {
            return Ok((x, SolveInfo { iterations: 0, relative_residual: 0.0 }));
        }
        let mut p = z.clone();
        for it in 1..=PCG_MAX_ITER {
            let q = apply(&p);
            let pq = dot(&p, &q);
            if pq <= 0.0 {
                return Err(PcgFailure::NegativeCurvature { pq, pk: self.space.energy(&p) });
            }
            let a = rz / pq;
            for i in 0..n {
                x[i] += a * p[i];
                r[i] -= a * q[i];
            }
            r = self.space.project_dual(&r);
            z = self.apply_kplus(&r);
            let rz_new = dot(&r, &z);
            let rel = (rz_new.max(0.0) / rz0).sqrt();
            if rel <= rel_tol {
                return Ok((self.space.project_mean_zero(&x), SolveInfo { iterations: it, relative_residual: rel }));
            }
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..n {
                p[i] = z[i] + beta * p[i];
            }
        }
        Err(PcgFailure::MaxIterations { iterations: PCG_MAX_ITER, residual: (rz.max(0.0) / rz0).sqrt() })
    }
}

const PCG_MAX_ITER: usize = 500;

#[derive(Debug, Clone, Copy)]
pub enum PcgFailure {
    /// p^T A p <= 0 along a search direction; `pk` is p^T K p.
    NegativeCurvature { pq: f64, pk: f64 },
    MaxIterations { iterations: usize, residual: f64 },
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::Field;
    use crate::mesh::{build_mesh, DomainSpec};

    fn system(h: f64) -> NeumannSystem {
        NeumannSystem::new(FemSpace::new(build_mesh(&DomainSpec::unit_square(h)).unwrap()).unwrap()).unwrap()
    }

    #[test]
    fn kplus_inverts_k_on_mean_zero_space() {
        let s = system(0.125);
        let sp = s.space();
        let u = sp.project_mean_zero(&Field::interpolate(sp.mesh(), |p| (3.0 * p[0]).sin() * p[1] * p[1]).values);
        let ku = sp.stiffness().mul_vec(&u);
        let back = s.apply_kplus(&ku);
        for (a, b) in back.iter().zip(&u) {
            assert!((a - b).abs() < 1e-11);
        }
    }

    #[test]
    fn alpha_solve_satisfies_system() {
        let s = system(0.125);
        let sp = s.space();
        let b: Vec<f64> = (0..sp.n()).map(|i| ((i * 7919) % 13) as f64 - 6.0).collect();
        let (x, info) = s.solve_alpha(&b, 5.0, 1e-13).unwrap();
        assert!(info.iterations > 0);
        assert!(sp.mean(&x).abs() < 1e-13);
        let res: Vec<f64> = sp.apply_alpha(&x, 5.0).iter().zip(sp.project_dual(&b)).map(|(a, b)| a - b).collect();
        assert!(s.minv_norm(&res) < 1e-10 * s.minv_norm(&b));
    }

    #[test]
    fn inadmissible_alpha_is_detected() {
        let s = system(0.125);
        let b: Vec<f64> = (0..s.space().n()).map(|i| (i as f64 * 0.37).sin()).collect();
        let err = s.solve_alpha(&b, 40.0, 1e-12).unwrap_err();
        assert!(matches!(err, Error::AlphaNotAdmissible { .. }));
    }
}
