//! P1 finite elements: stiffness and mass assembly, the mean-zero subspace,
//! the alpha-modified norm and quadrature of nonlinear functionals.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mesh::{Mesh, Point};
use crate::quad::triangle_rule7;
use crate::sparse::{dot, CsrMatrix};

/// Exponent above which `exp` is refused.
pub const MAX_EXPONENT: f64 = 700.0;

/// Nodal coefficients of a piecewise-linear function.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub values: Vec<f64>,
}

impl Field {
    pub fn new(mesh: &Mesh, values: Vec<f64>) -> Result<Self> {
        if values.len() != mesh.num_nodes() {
            return Err(Error::InvalidParameter(format!(
                "field has {} values but the mesh has {} nodes",
                values.len(),
                mesh.num_nodes()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!("field value at node {i} is not finite")));
        }
        Ok(Self { values })
    }

    pub fn interpolate(mesh: &Mesh, f: impl Fn(Point) -> f64) -> Self {
        Self { values: mesh.nodes().iter().map(|&p| f(p)).collect() }
    }

    /// Serializes to the `mt-field v1` text format.
    pub fn to_text(&self, mesh_hash: &str) -> String {
        let mut s = String::with_capacity(26 * self.values.len() + 100);
        s.push_str("mt-field v1\n");
        let _ = writeln!(s, "nodes {}", self.values.len());
        for v in &self.values {
            let _ = writeln!(s, "{v:.16e}");
        }
        let _ = writeln!(s, "mesh-sha256 {mesh_hash}");
        s
    }

    /// Parses the `mt-field v1` format, returning the field and the mesh hash.
    pub fn from_text(text: &str) -> Result<(Self, String)> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        if lines.next() != Some("mt-field v1") {
            return Err(Error::Parse("missing `mt-field v1` header".into()));
        }
        let n: usize = lines
            .next()
            .and_then(|l| l.strip_prefix("nodes"))
            .and_then(|c| c.trim().parse().ok())
            .ok_or_else(|| Error::Parse("expected `nodes <count>`".into()))?;
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            let l = lines.next().ok_or_else(|| Error::Parse("field truncated".into()))?;
            values.push(l.parse().map_err(|_| Error::Parse(format!("bad value `{l}`")))?);
        }
        let hash = lines
            .next()
            .and_then(|l| l.strip_prefix("mesh-sha256"))
            .map(|h| h.trim().to_string())
            .ok_or_else(|| Error::Parse("expected `mesh-sha256 <hex>`".into()))?;
        Ok((Self { values }, hash))
    }
}

/// Gradients of the three barycentric coordinates of triangle `t`.
pub fn barycentric_gradients(p: [Point; 3]) -> [[f64; 2]; 3] {
    let two_area = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]);
    let mut g = [[0.0; 2]; 3];
    for i in 0..3 {
        let (a, b) = (p[(i + 1) % 3], p[(i + 2) % 3]);
        g[i] = [(a[1] - b[1]) / two_area, (b[0] - a[0]) / two_area];
    }
    g
}

fn check_triangles(mesh: &Mesh) -> Result<()> {
    for t in 0..mesh.num_triangles() {
        let a = mesh.triangle_area(t);
        if !(a > 0.0) {
            return Err(Error::DegenerateTriangle { index: t, area: a });
        }
    }
    Ok(())
}

fn assemble(mesh: &Mesh, local: impl Fn(usize) -> [[f64; 3]; 3] + Sync) -> CsrMatrix {
    let blocks: Vec<[[f64; 3]; 3]> = (0..mesh.num_triangles()).into_par_iter().map(&local).collect();
    let mut trip = Vec::with_capacity(9 * blocks.len());
    for (t, b) in blocks.iter().enumerate() {
        let tri = mesh.triangles()[t];
        for i in 0..3 {
            for j in 0..3 {
                trip.push((tri[i], tri[j], b[i][j]));
            }
        }
    }
    CsrMatrix::from_triplets(mesh.num_nodes(), trip)
}

/// Stiffness matrix K with K_ij = int grad(phi_i) . grad(phi_j).
pub fn assemble_stiffness(mesh: &Mesh) -> Result<CsrMatrix> {
    check_triangles(mesh)?;
    Ok(assemble(mesh, |t| {
        let g = barycentric_gradients(mesh.triangle_points(t));
        let area = mesh.triangle_area(t);
        let mut k = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                k[i][j] = area * (g[i][0] * g[j][0] + g[i][1] * g[j][1]);
            }
        }
        k
    }))
}

/// Consistent mass matrix M with M_ij = int phi_i phi_j.
pub fn assemble_mass(mesh: &Mesh) -> Result<CsrMatrix> {
    check_triangles(mesh)?;
    Ok(assemble(mesh, |t| {
        let area = mesh.triangle_area(t);
        let mut m = [[area / 12.0; 3]; 3];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = area / 6.0;
        }
        m
    }))
}

/// Precomputed finite-element data for one mesh.
#[derive(Debug, Clone)]
pub struct FemSpace {
    mesh: Mesh,
    stiffness: CsrMatrix,
    mass: CsrMatrix,
    /// m = M 1, so that int u = m . u.
    weights: Vec<f64>,
    area: f64,
}

impl FemSpace {
    pub fn new(mesh: Mesh) -> Result<Self> {
        let stiffness = assemble_stiffness(&mesh)?;
        let mass = assemble_mass(&mesh)?;
        let weights = mass.mul_vec(&vec![1.0; mesh.num_nodes()]);
        let area = mesh.area();
        Ok(Self { mesh, stiffness, mass, weights, area })
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn stiffness(&self) -> &CsrMatrix {
        &self.stiffness
    }

    pub fn mass(&self) -> &CsrMatrix {
        &self.mass
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn area(&self) -> f64 {
        self.area
    }

    pub fn n(&self) -> usize {
        self.mesh.num_nodes()
    }

    /// int u dx.
    pub fn integral(&self, u: &[f64]) -> f64 {
        dot(&self.weights, u)
    }

    pub fn mean(&self, u: &[f64]) -> f64 {
        self.integral(u) / self.area
    }

    pub fn project_mean_zero(&self, u: &[f64]) -> Vec<f64> {
        let c = self.mean(u);
        u.iter().map(|v| v - c).collect()
    }

    /// Projects a dual vector (right-hand side) so that it annihilates constants.
    pub fn project_dual(&self, r: &[f64]) -> Vec<f64> {
        let s: f64 = r.iter().sum::<f64>() / self.area;
        r.iter().zip(&self.weights).map(|(r, m)| r - s * m).collect()
    }

    pub fn energy(&self, u: &[f64]) -> f64 {
        self.stiffness.quadratic(u)
    }

    pub fn mass_norm_sq(&self, u: &[f64]) -> f64 {
        self.mass.quadratic(u)
    }

    /// u^T (K - alpha M) u.
    pub fn form_alpha(&self, u: &[f64], alpha: f64) -> f64 {
        self.energy(u) - alpha * self.mass_norm_sq(u)
    }

    /// ||u||_{1,alpha} = sqrt(u^T K u - alpha u^T M u).
    pub fn norm_1alpha(&self, u: &[f64], alpha: f64) -> Result<f64> {
        let q = self.form_alpha(u, alpha);
        let scale = self.energy(u).max(f64::MIN_POSITIVE);
        if q < 0.0 {
            if q > -1e-14 * scale {
                return Ok(0.0);
            }
            return Err(Error::NegativeQuadraticForm { value: q });
        }
        Ok(q.sqrt())
    }

    /// (K - alpha M) u.
    pub fn apply_alpha(&self, u: &[f64], alpha: f64) -> Vec<f64> {
        let mut y = self.stiffness.mul_vec(u);
        if alpha != 0.0 {
            let mu = self.mass.mul_vec(u);
            for (y, m) in y.iter_mut().zip(mu) {
                *y -= alpha * m;
            }
        }
        y
    }

    /// Integrates `g(t, lambda, u_h)` with the 7-point rule on every
    /// triangle, where `u_h` is the linear interpolant of `u` at the point.
    /// Per-triangle values are reduced in triangle order.
    pub fn integrate_nodal(&self, u: &[f64], g: impl Fn(f64) -> f64 + Sync) -> f64 {
        let rule = triangle_rule7();
        let tris = self.mesh.triangles();
        let parts: Vec<f64> = (0..tris.len())
            .into_par_iter()
            .map(|t| {
                let [a, b, c] = tris[t];
                let s: f64 = rule.iter().map(|(l, w)| w * g(l[0] * u[a] + l[1] * u[b] + l[2] * u[c])).sum();
                s * self.mesh.triangle_area(t)
            })
            .collect();
        parts.iter().sum()
    }

    /// Integrates `g(u_h, v_h)` for two fields with the 7-point rule.
    pub fn integrate_pair(&self, u: &[f64], v: &[f64], g: impl Fn(f64, f64) -> f64 + Sync) -> f64 {
        let rule = triangle_rule7();
        let tris = self.mesh.triangles();
        let parts: Vec<f64> = (0..tris.len())
            .into_par_iter()
            .map(|t| {
                let [a, b, c] = tris[t];
                let s: f64 = rule
                    .iter()
                    .map(|(l, w)| {
                        w * g(l[0] * u[a] + l[1] * u[b] + l[2] * u[c], l[0] * v[a] + l[1] * v[b] + l[2] * v[c])
                    })
                    .sum();
                s * self.mesh.triangle_area(t)
            })
            .collect();
        parts.iter().sum()
    }

    /// Load vector b_i = int g(u_h) phi_i with the 7-point rule.
    pub fn load_vector(&self, u: &[f64], g: impl Fn(f64) -> f64 + Sync) -> Vec<f64> {
        let rule = triangle_rule7();
        let tris = self.mesh.triangles();
        let parts: Vec<[f64; 3]> = (0..tris.len())
            .into_par_iter()
            .map(|t| {
                let [a, b, c] = tris[t];
                let area = self.mesh.triangle_area(t);
                let mut loc = [0.0; 3];
                for (l, w) in &rule {
                    let v = w * area * g(l[0] * u[a] + l[1] * u[b] + l[2] * u[c]);
                    for k in 0..3 {
                        loc[k] += v * l[k];
                    }
                }
                loc
            })
            .collect();
        let mut out = vec![0.0; self.n()];
        for (t, loc) in parts.iter().enumerate() {
            for (k, &node) in tris[t].iter().enumerate() {
                out[node] += loc[k];
            }
        }
        out
    }

    /// Weighted mass matrix W_ij = int g(u_h) phi_i phi_j with the 7-point rule.
    pub fn weighted_mass(&self, u: &[f64], g: impl Fn(f64) -> f64 + Sync) -> CsrMatrix {
        let rule = triangle_rule7();
        let tris = self.mesh.triangles();
        assemble(&self.mesh, |t| {
            let [a, b, c] = tris[t];
            let area = self.mesh.triangle_area(t);
            let mut loc = [[0.0; 3]; 3];
            for (l, w) in &rule {
                let v = w * area * g(l[0] * u[a] + l[1] * u[b] + l[2] * u[c]);
                for i in 0..3 {
                    for j in 0..3 {
                        loc[i][j] += v * l[i] * l[j];
                    }
                }
            }
            loc
        })
    }

    /// Fails with [`Error::Overflow`] if `beta * u^2` exceeds [`MAX_EXPONENT`]
    /// anywhere. The linear interpolant attains its extremes at vertices,
    /// so checking nodes is exact.
    pub fn check_exponent(&self, u: &[f64], beta: f64) -> Result<()> {
        let max_abs = u.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if beta * max_abs * max_abs <= MAX_EXPONENT {
            return Ok(());
        }
        for (t, tri) in self.mesh.triangles().iter().enumerate() {
            let e = tri.iter().map(|&i| beta * u[i] * u[i]).fold(0.0, f64::max);
            if e > MAX_EXPONENT {
                return Err(Error::Overflow { triangle: t, exponent: e, max_abs });
            }
        }
        Ok(())
    }

    /// int exp(beta u^2) dx.
    pub fn functional_exp(&self, u: &[f64], beta: f64) -> Result<f64> {
        if !(beta >= 0.0) {
            return Err(Error::InvalidParameter(format!("beta must be non-negative, got {beta}")));
        }
        self.check_exponent(u, beta)?;
        Ok(self.integrate_nodal(u, |v| (beta * v * v).exp()))
    }

    /// Squared Dirichlet energy of `u` restricted to triangles whose
    /// centroid lies within `radius` of `center`.
    pub fn local_energy(&self, u: &[f64], center: Point, radius: f64) -> f64 {
        let mut e = 0.0;
        for (t, tri) in self.mesh.triangles().iter().enumerate() {
            let p = self.mesh.triangle_points(t);
            let c = [(p[0][0] + p[1][0] + p[2][0]) / 3.0, (p[0][1] + p[1][1] + p[2][1]) / 3.0];
            if crate::mesh::dist(c, center) > radius {
                continue;
            }
            let g = barycentric_gradients(p);
            let mut grad = [0.0; 2];
            for k in 0..3 {
                grad[0] += u[tri[k]] * g[k][0];
                grad[1] += u[tri[k]] * g[k][1];
            }
            e += self.mesh.triangle_area(t) * (grad[0] * grad[0] + grad[1] * grad[1]);
        }
        e
    }

    /// Evaluates the linear interpolant of `u` at `x`; `None` outside the mesh.
    pub fn evaluate(&self, u: &[f64], x: Point) -> Option<f64> {
        for (t, tri) in self.mesh.triangles().iter().enumerate() {
            let l = barycentric(self.mesh.triangle_points(t), x);
            if l.iter().all(|&v| v >= -1e-12) {
                return Some(l[0] * u[tri[0]] + l[1] * u[tri[1]] + l[2] * u[tri[2]]);
            }
        }
        None
    }
}

pub fn barycentric(p: [Point; 3], x: Point) -> [f64; 3] {
    let area = crate::mesh::signed_area(p[0], p[1], p[2]);
    [
        crate::mesh::signed_area(x, p[1], p[2]) / area,
        crate::mesh::signed_area(p[0], x, p[2]) / area,
        crate::mesh::signed_area(p[0], p[1], x) / area,
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_mesh, DomainSpec};

    fn square(h: f64) -> FemSpace {
        FemSpace::new(build_mesh(&DomainSpec::unit_square(h)).unwrap()).unwrap()
    }

    #[test]
    fn stiffness_of_linear_functions() {
        let s = square(0.125);
        let x = Field::interpolate(s.mesh(), |p| p[0]).values;
        let xy = Field::interpolate(s.mesh(), |p| p[0] + 2.0 * p[1]).values;
        assert!((s.energy(&x) - 1.0).abs() < 1e-12);
        assert!((s.energy(&xy) - 5.0).abs() < 1e-12);
        assert!(s.energy(&vec![3.0; s.n()]).abs() < 1e-12);
        assert!(s.stiffness().mul_vec(&vec![1.0; s.n()]).iter().all(|v| v.abs() < 1e-12));
        assert_eq!(s.stiffness().asymmetry(), 0.0);
    }

    #[test]
    fn mass_of_constants_and_x() {
        let s = square(0.125);
        assert!((s.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((s.mass_norm_sq(&vec![2.0; s.n()]) - 4.0).abs() < 1e-12);
        let x = Field::interpolate(s.mesh(), |p| p[0]).values;
        assert!((s.mass_norm_sq(&x) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn mean_zero_projection() {
        let s = square(0.25);
        let x = Field::interpolate(s.mesh(), |p| p[0]).values;
        let px = s.project_mean_zero(&x);
        for (a, b) in px.iter().zip(&x) {
            assert!((a - (b - 0.5)).abs() < 1e-14);
        }
        assert!(s.project_mean_zero(&vec![7.0; s.n()]).iter().all(|v| v.abs() < 1e-14));
        let twice = s.project_mean_zero(&px);
        assert!(twice.iter().zip(&px).all(|(a, b)| (a - b).abs() < 1e-14));
    }

    #[test]
    fn norm_rejects_negative_form() {
        let s = square(0.25);
        let x = s.project_mean_zero(&Field::interpolate(s.mesh(), |p| p[0]).values);
        assert!((s.norm_1alpha(&x, 0.0).unwrap() - s.energy(&x).sqrt()).abs() < 1e-15);
        assert!(matches!(s.norm_1alpha(&x, 100.0), Err(Error::NegativeQuadraticForm { .. })));
        assert_eq!(s.norm_1alpha(&vec![0.0; s.n()], 1.0).unwrap(), 0.0);
    }

    #[test]
    fn functional_exp_basics() {
        let s = square(0.25);
        let zero = vec![0.0; s.n()];
        assert!((s.functional_exp(&zero, 3.0).unwrap() - 1.0).abs() < 1e-14);
        let big = vec![30.0; s.n()];
        assert!(matches!(s.functional_exp(&big, 1.0), Err(Error::Overflow { .. })));
        assert!(s.functional_exp(&zero, -1.0).is_err());
    }

    #[test]
    fn field_text_round_trip() {
        let s = square(0.5);
        let f = Field::interpolate(s.mesh(), |p| (p[0] * 3.3).sin() / 7.0);
        let (back, hash) = Field::from_text(&f.to_text("abc")).unwrap();
        assert_eq!(back, f);
        assert_eq!(hash, "abc");
    }

    #[test]
    fn evaluate_reproduces_linear_fields() {
        let s = square(0.25);
        let u = Field::interpolate(s.mesh(), |p| 2.0 * p[0] - p[1]).values;
        let v = s.evaluate(&u, [0.31, 0.77]).unwrap();
        assert!((v - (0.62 - 0.77)).abs() < 1e-14);
        assert!(s.evaluate(&u, [1.5, 0.5]).is_none());
    }
}
