//! First nonzero Neumann eigenvalue of (K, M) on the mean-zero subspace.
//!
//! Block inverse iteration (shift 0, constants deflated by projection at
//! every step) with Rayleigh-Ritz on the block, which copes with the
//! degenerate first eigenvalue of symmetric domains.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fem::Field;
use crate::solver::NeumannSystem;
use crate::sparse::dot;

#[derive(Debug, Clone, Serialize)]
pub struct EigenResult {
    pub lambda1: f64,
    #[serde(skip)]
    pub eigenfield: Field,
    pub residual: f64,
    pub h: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct EigenPair {
    pub value: f64,
    /// M-normalized, mean-zero.
    pub vector: Vec<f64>,
    pub residual: f64,
}

const MAX_ITER: usize = 500;

/// Smallest nonzero eigenvalue and an M-normalized eigenvector.
pub fn neumann_lambda1(sys: &NeumannSystem, tol: f64) -> Result<EigenResult> {
    let (pairs, iterations) = eigenpairs_with_count(sys, 1, tol)?;
    let p = pairs.into_iter().next().expect("one pair requested");
    Ok(EigenResult {
        lambda1: p.value,
        eigenfield: Field { values: p.vector },
        residual: p.residual,
        h: sys.space().mesh().max_edge_length(),
        iterations,
    })
}

/// The `count` smallest nonzero eigenpairs, ascending.
pub fn neumann_eigenpairs(sys: &NeumannSystem, count: usize, tol: f64) -> Result<Vec<EigenPair>> {
    eigenpairs_with_count(sys, count, tol).map(|r| r.0)
}

fn eigenpairs_with_count(sys: &NeumannSystem, count: usize, tol: f64) -> Result<(Vec<EigenPair>, usize)> {
    if !(tol > 0.0) {
        return Err(Error::InvalidParameter(format!("eigen tolerance must be positive, got {tol}")));
    }
    let sp = sys.space();
    let n = sp.n();
    if count == 0 || count + 1 >= n {
        return Err(Error::InvalidParameter(format!("cannot compute {count} eigenpairs on {n} nodes")));
    }
    let block = (count + 3).max(4).min(n - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut x: Vec<Vec<f64>> = (0..block)
        .map(|_| sp.project_mean_zero(&(0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>()))
        .collect();
    let mut last_res = f64::INFINITY;
    for it in 1..=MAX_ITER {
        let y: Vec<Vec<f64>> = x.iter().map(|v| sys.apply_kplus(&sp.mass().mul_vec(v))).collect();
        let ky: Vec<Vec<f64>> = y.iter().map(|v| sp.stiffness().mul_vec(v)).collect();
        let my: Vec<Vec<f64>> = y.iter().map(|v| sp.mass().mul_vec(v)).collect();
        let kr = DMatrix::from_fn(block, block, |i, j| 0.5 * (dot(&y[i], &ky[j]) + dot(&y[j], &ky[i])));
        let mr = DMatrix::from_fn(block, block, |i, j| 0.5 * (dot(&y[i], &my[j]) + dot(&y[j], &my[i])));
        let coef = ritz(&kr, &mr)?;
        x = (0..block)
            .map(|c| {
                let mut v = vec![0.0; n];
                for (j, yj) in y.iter().enumerate() {
                    let a = coef[(j, c)];
                    for (vi, yi) in v.iter_mut().zip(yj) {
                        *vi += a * yi;
                    }
                }
                sp.project_mean_zero(&v)
            })
            .collect();
        let mut pairs = Vec::with_capacity(count);
        let mut worst: f64 = 0.0;
        for c in 0..count {
            let v = &x[c];
            let norm = sp.mass_norm_sq(v).sqrt();
            let v: Vec<f64> = v.iter().map(|a| a / norm).collect();
            let lam = sp.energy(&v) / sp.mass_norm_sq(&v);
            let kv = sp.stiffness().mul_vec(&v);
            let mv = sp.mass().mul_vec(&v);
            let r: Vec<f64> = kv.iter().zip(&mv).map(|(k, m)| k - lam * m).collect();
            let res = sys.minv_norm(&r).max(dot(&r, &r).sqrt());
            worst = worst.max(res);
            pairs.push(EigenPair { value: lam, vector: orient(v), residual: res });
        }
        last_res = worst;
        if pairs.iter().all(|p| p.residual <= tol) {
            return Ok((pairs, it));
        }
    }
    Err(Error::NotConverged { what: "Neumann eigensolver".into(), iterations: MAX_ITER, residual: last_res })
}

/// Dense generalized eigenproblem kr c = l mr c; columns of the returned
/// matrix are mr-orthonormal eigenvectors, sorted by ascending eigenvalue.
fn ritz(kr: &DMatrix<f64>, mr: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = mr.clone().cholesky().ok_or(Error::NotPositiveDefinite { row: 0, pivot: f64::NAN })?;
    let l = chol.l();
    let linv = l.clone().try_inverse().ok_or(Error::NotPositiveDefinite { row: 0, pivot: 0.0 })?;
    let c = &linv * kr * linv.transpose();
    let c = 0.5 * (&c + c.transpose());
    let eig = SymmetricEigen::new(c);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let vecs = DMatrix::from_fn(kr.nrows(), order.len(), |r, c| eig.eigenvectors[(r, order[c])]);
    Ok(linv.transpose() * vecs)
}

/// Fixes the sign so that the entry of largest magnitude is positive.
fn orient(mut v: Vec<f64>) -> Vec<f64> {
    let (mut best, mut idx) = (0.0, 0);
    for (i, a) in v.iter().enumerate() {
        if a.abs() > best {
            best = a.abs();
            idx = i;
        }
    }
    if v[idx] < 0.0 {
        v.iter_mut().for_each(|a| *a = -*a);
    }
    v
}

/// Rejects alpha that is not strictly below the discrete first eigenvalue.
pub fn check_alpha(alpha: f64, lambda1: f64) -> Result<()> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidParameter(format!("alpha must be a finite non-negative number, got {alpha}")));
    }
    if alpha >= lambda1 {
        return Err(Error::AlphaNotAdmissible { alpha, lambda1 });
    }
    Ok(())
}
