//! Neumann Green function with a boundary source and the constant A_p of
//! its expansion `G(x) = -(1/pi) log|x - p| + A_p + O(|x - p|)`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fem::Field;
use crate::mesh::{dist, BoundaryPoint, Point};
use crate::solver::NeumannSystem;

/// Minimum number of nodes in the fit annulus.
pub const MIN_FIT_NODES: usize = 12;

#[derive(Debug, Clone, Serialize)]
pub struct GreenResult {
    pub node_id: usize,
    pub p: Point,
    pub alpha: f64,
    #[serde(skip)]
    pub g: Field,
    /// G + (1/pi) log|x - p| at the nodes; the value at p itself is the
    /// fitted constant and takes no part in the fit.
    #[serde(skip)]
    pub regular_part: Field,
    pub a_p: f64,
    /// Gradient of the linear fit term, an estimate of grad beta(p).
    pub fit_slope: [f64; 2],
    pub fit_radii: (f64, f64),
    pub fit_nodes: usize,
    pub fit_rms: f64,
    pub bound_b: f64,
    /// |int G dx|.
    pub mean_residual: f64,
    /// M^{-1}-norm of the discrete weak-form residual.
    pub weak_residual: f64,
}

impl GreenResult {
    /// Regular part from the linear fit model, valid near p.
    pub fn fit_model(&self, x: Point) -> f64 {
        self.a_p + self.fit_slope[0] * (x[0] - self.p[0]) + self.fit_slope[1] * (x[1] - self.p[1])
    }
}

/// `|Omega| + (pi/2) exp(1 + 2 pi A_p)`.
pub fn theorem_bound(area: f64, a_p: f64) -> f64 {
    area + 0.5 * std::f64::consts::PI * (1.0 + 2.0 * std::f64::consts::PI * a_p).exp()
}

/// Default annulus: r_in = 4h, r_out = 2 r_in with h the maximum edge
/// length. The nodal-delta error decays like (h/r)^2 and is about 1% of
/// A_p at 4h, while the quadratic part of the regular part biases the
/// linear fit by O(r_in^2).
pub fn default_fit_radii(h: f64) -> (f64, f64) {
    (4.0 * h, 8.0 * h)
}

/// Solves `int grad G . grad v - alpha int G v = v(p) - |Omega|^{-1} int v`
/// for mean-zero G and extracts A_p by a least-squares fit of
/// `c0 + c1 . (x - p)` to the regular part on the annulus
/// `r_in <= |x - p| <= r_out`.
pub fn solve_green(
    sys: &NeumannSystem,
    alpha: f64,
    p: BoundaryPoint,
    tol: f64,
    fit_radii: Option<(f64, f64)>,
) -> Result<GreenResult> {
    let sp = sys.space();
    let mesh = sp.mesh();
    if p.node_id >= mesh.num_nodes() || !mesh.is_boundary_node(p.node_id) {
        return Err(Error::InvalidParameter(format!("node {} is not a boundary node", p.node_id)));
    }
    if mesh.is_corner(p.node_id) {
        return Err(Error::InvalidParameter(format!(
            "boundary node {} is a corner (interior angle {:.4} rad); Green sources must lie on a straight or smooth part of the boundary",
            p.node_id,
            mesh.angle_at(p.node_id)
        )));
    }
    let (r_in, r_out) = fit_radii.unwrap_or_else(|| default_fit_radii(mesh.max_edge_length()));
    if !(r_in > 0.0 && r_out > r_in) {
        return Err(Error::InvalidParameter(format!("fit annulus ({r_in}, {r_out}) is empty")));
    }
    let g = green_field(sys, alpha, p.node_id, tol)?;

    let pc = mesh.nodes()[p.node_id];
    let mut regular: Vec<f64> = mesh
        .nodes()
        .iter()
        .zip(&g)
        .map(|(&x, &gv)| {
            let r = dist(x, pc);
            if r > 0.0 {
                gv + r.ln() / std::f64::consts::PI
            } else {
                0.0
            }
        })
        .collect();
    let annulus: Vec<usize> = (0..mesh.num_nodes())
        .filter(|&i| {
            let r = dist(mesh.nodes()[i], pc);
            r >= r_in && r <= r_out
        })
        .collect();
    if annulus.len() < MIN_FIT_NODES {
        return Err(Error::InsufficientFitNodes { found: annulus.len(), required: MIN_FIT_NODES });
    }
    let a = DMatrix::from_fn(annulus.len(), 3, |r, c| {
        let x = mesh.nodes()[annulus[r]];
        match c {
            0 => 1.0,
            1 => x[0] - pc[0],
            _ => x[1] - pc[1],
        }
    });
    let b = DVector::from_iterator(annulus.len(), annulus.iter().map(|&i| regular[i]));
    let coef = a
        .clone()
        .svd(true, true)
        .solve(&b, 1e-14)
        .map_err(|e| Error::InvalidParameter(format!("fit failed: {e}")))?;
    let resid = &a * &coef - &b;
    let fit_rms = (resid.norm_squared() / annulus.len() as f64).sqrt();
    let a_p = coef[0];
    regular[p.node_id] = a_p;

    let rhs = source(sys, p.node_id);
    let weak: Vec<f64> = sp.apply_alpha(&g, alpha).iter().zip(&rhs).map(|(x, y)| x - y).collect();
    let weak_residual = sys.minv_norm(&weak);
    Ok(GreenResult {
        node_id: p.node_id,
        p: pc,
        alpha,
        mean_residual: sp.integral(&g).abs(),
        g: Field { values: g },
        regular_part: Field { values: regular },
        a_p,
        fit_slope: [coef[1], coef[2]],
        fit_radii: (r_in, r_out),
        fit_nodes: annulus.len(),
        fit_rms,
        bound_b: theorem_bound(sp.area(), a_p),
        weak_residual,
    })
}

/// Right-hand side e_p - m / |Omega|.
fn source(sys: &NeumannSystem, node: usize) -> Vec<f64> {
    let sp = sys.space();
    let mut b: Vec<f64> = sp.weights().iter().map(|m| -m / sp.area()).collect();
    b[node] += 1.0;
    b
}

/// Nodal Green function for a source at `node`, scaled by `strength`.
pub fn green_field_scaled(sys: &NeumannSystem, alpha: f64, node: usize, strength: f64, tol: f64) -> Result<Vec<f64>> {
    let b: Vec<f64> = source(sys, node).iter().map(|v| strength * v).collect();
    Ok(sys.solve_alpha(&b, alpha, tol)?.0)
}

fn green_field(sys: &NeumannSystem, alpha: f64, node: usize, tol: f64) -> Result<Vec<f64>> {
    green_field_scaled(sys, alpha, node, 1.0, tol)
}

#[derive(Debug, Clone, Serialize)]
pub struct SurveyEntry {
    pub node_id: usize,
    pub x: f64,
    pub y: f64,
    pub a_p: f64,
    pub bound_b: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SurveyReport {
    pub entries: Vec<SurveyEntry>,
    /// Sample positions skipped because the nearest node is a corner.
    pub skipped_corners: Vec<usize>,
    pub min_a_p: f64,
    pub max_a_p: f64,
    pub argmax_node: usize,
    pub max_bound_b: f64,
}

/// Points at arc lengths `(k + 1/2) L / n` along the boundary loop
/// (starting at its smallest-index node), snapped to the nearest node.
pub fn boundary_samples(sys: &NeumannSystem, sample_count: usize) -> Vec<usize> {
    let mesh = sys.space().mesh();
    let lp = mesh.boundary_loop();
    let pts: Vec<Point> = lp.iter().map(|&i| mesh.nodes()[i]).collect();
    let m = pts.len();
    let mut cum = vec![0.0; m + 1];
    for i in 0..m {
        cum[i + 1] = cum[i] + dist(pts[i], pts[(i + 1) % m]);
    }
    let total = cum[m];
    (0..sample_count)
        .map(|k| {
            let s = (k as f64 + 0.5) * total / sample_count as f64;
            let seg = cum.partition_point(|&c| c <= s).saturating_sub(1).min(m - 1);
            let t = (s - cum[seg]) / (cum[seg + 1] - cum[seg]);
            let (a, b) = (pts[seg], pts[(seg + 1) % m]);
            let target = [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];
            crate::mesh::pick_boundary_point(mesh, target).node_id
        })
        .collect()
}

/// A_p and the bound at `sample_count` equispaced boundary points.
pub fn bound_over_boundary(sys: &NeumannSystem, alpha: f64, sample_count: usize, tol: f64) -> Result<SurveyReport> {
    if sample_count < 4 {
        return Err(Error::InvalidParameter(format!("sample_count must be at least 4, got {sample_count}")));
    }
    let mesh = sys.space().mesh();
    let nodes = boundary_samples(sys, sample_count);
    let (corners, usable): (Vec<usize>, Vec<usize>) = nodes.into_iter().partition(|&n| mesh.is_corner(n));
    let results: Vec<Result<GreenResult>> = usable
        .par_iter()
        .map(|&n| solve_green(sys, alpha, BoundaryPoint { node_id: n, coords: mesh.nodes()[n] }, tol, None))
        .collect();
    let mut entries = Vec::with_capacity(results.len());
    for r in results {
        let r = r?;
        entries.push(SurveyEntry { node_id: r.node_id, x: r.p[0], y: r.p[1], a_p: r.a_p, bound_b: r.bound_b });
    }
    if entries.is_empty() {
        return Err(Error::InvalidParameter("every sample point is a corner".into()));
    }
    let min_a_p = entries.iter().map(|e| e.a_p).fold(f64::INFINITY, f64::min);
    let best = entries.iter().fold(&entries[0], |b, e| if e.a_p > b.a_p { e } else { b });
    Ok(SurveyReport {
        min_a_p,
        max_a_p: best.a_p,
        argmax_node: best.node_id,
        max_bound_b: best.bound_b,
        entries,
        skipped_corners: corners,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::FemSpace;
    use crate::mesh::{build_mesh, pick_boundary_point, DomainSpec};

    fn system(spec: DomainSpec) -> NeumannSystem {
        NeumannSystem::new(FemSpace::new(build_mesh(&spec).unwrap()).unwrap()).unwrap()
    }

    #[test]
    fn bound_formula() {
        let pi = std::f64::consts::PI;
        assert!((theorem_bound(pi, 0.0) - (pi + 0.5 * pi * 1f64.exp())).abs() < 1e-14);
        assert!((theorem_bound(pi, 0.0) - 7.4120).abs() < 1e-3);
        assert!(theorem_bound(1.0, 0.1) > theorem_bound(1.0, 0.05));
    }

    #[test]
    fn green_has_zero_mean_and_scales_linearly() {
        let sys = system(DomainSpec::disk(1.0, 0.1));
        let p = pick_boundary_point(sys.space().mesh(), [1.0, 0.0]);
        let g = solve_green(&sys, 0.0, p, 1e-12, None).unwrap();
        assert!(g.mean_residual < 1e-10 * sys.space().area());
        let g2 = green_field_scaled(&sys, 0.5, p.node_id, 2.0, 1e-14).unwrap();
        let g1 = green_field_scaled(&sys, 0.5, p.node_id, 1.0, 1e-14).unwrap();
        for (a, b) in g2.iter().zip(&g1) {
            assert!((a - 2.0 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn corners_and_sparse_annuli_are_rejected() {
        let sys = system(DomainSpec::unit_square(0.25));
        let corner = pick_boundary_point(sys.space().mesh(), [0.0, 0.0]);
        assert!(solve_green(&sys, 0.0, corner, 1e-10, None).is_err());
        let mid = pick_boundary_point(sys.space().mesh(), [0.5, 0.0]);
        let err = solve_green(&sys, 0.0, mid, 1e-10, Some((0.1, 0.2))).unwrap_err();
        assert!(matches!(err, Error::InsufficientFitNodes { .. }));
    }

    #[test]
    fn square_survey_hits_edge_midpoints() {
        let sys = system(DomainSpec::unit_square(0.125));
        let nodes = boundary_samples(&sys, 4);
        let pts: Vec<Point> = nodes.iter().map(|&n| sys.space().mesh().nodes()[n]).collect();
        assert_eq!(pts, vec![[0.5, 0.0], [1.0, 0.5], [0.5, 1.0], [0.0, 0.5]]);
    }
}
