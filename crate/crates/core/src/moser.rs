//! The Chen-Li bubble, the harmonic annulus competitor and the Moser-type
//! test functions glued to the Neumann Green function at a boundary point.
//!
//! Near p the domain is treated as a half-disk, so radial integrals carry
//! the weight `pi r dr`. In that region the Green function is replaced by
//! the harmonic model `-(1/pi) log r + A_p + s_t x_t`, where `x_t` is the
//! tangential coordinate; it has zero normal derivative on the flat
//! boundary, which keeps the flux identities exact.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{barycentric, MAX_EXPONENT};
use crate::green::{theorem_bound, GreenResult};
use crate::mesh::{dist, BoundaryShape, Mesh, Point};
use crate::quad::{gauss_legendre, integrate_with_breaks, triangle_rule7};
use crate::solver::NeumannSystem;

/// `phi(r) = -(1/2pi) log(1 + (pi/2) r^2)`.
pub fn profile(r: f64) -> f64 {
    0.0 - (0.5 * PI * r * r).ln_1p() / (2.0 * PI)
}

/// phi'(r), differentiated by hand.
pub fn profile_d1(r: f64) -> f64 {
    -r / (2.0 + PI * r * r)
}

/// phi''(r).
pub fn profile_d2(r: f64) -> f64 {
    let q = 2.0 + PI * r * r;
    -(2.0 - PI * r * r) / (q * q)
}

pub const MIN_PROFILE_RMAX: f64 = 1e3;
pub const MIN_PROFILE_POINTS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlowupProfile {
    pub r_max: f64,
    pub points: usize,
}

impl Default for BlowupProfile {
    fn default() -> Self {
        Self { r_max: MIN_PROFILE_RMAX, points: MIN_PROFILE_POINTS }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ProfileReport {
    pub r_max: f64,
    pub points: usize,
    /// (grid points, max residual) for the requested grid and two halvings of dr.
    pub residuals: Vec<(usize, f64)>,
    pub max_residual: f64,
    /// log2 of the residual ratio between the last two grids.
    pub residual_order: f64,
    /// 2 pi int_0^r_max exp(4 pi phi) r dr plus the exact tail.
    pub mass: f64,
    pub mass_tail: f64,
    pub phi0: f64,
    pub monotone: bool,
    /// -phi''(1) - phi'(1) from the hand derivatives.
    pub laplacian_at_1: f64,
    /// exp(4 pi phi(1)).
    pub source_at_1: f64,
}

/// Max over interior grid points of `|-phi'' - phi'/r - exp(4 pi phi)|`
/// with central differences.
pub fn profile_fd_residual(r_max: f64, points: usize) -> f64 {
    let dr = r_max / points as f64;
    (1..points)
        .map(|i| {
            let r = i as f64 * dr;
            let (a, b, c) = (profile(r - dr), profile(r), profile(r + dr));
            let lap = (c - 2.0 * b + a) / (dr * dr) + (c - a) / (2.0 * dr * r);
            (-lap - (4.0 * PI * b).exp()).abs()
        })
        .fold(0.0, f64::max)
}

pub fn verify_profile(spec: &BlowupProfile) -> Result<ProfileReport> {
    if !(spec.r_max >= MIN_PROFILE_RMAX) || spec.points < MIN_PROFILE_POINTS {
        return Err(Error::InvalidParameter(format!(
            "profile grid too coarse: need r_max >= {MIN_PROFILE_RMAX} and at least {MIN_PROFILE_POINTS} points, got r_max = {}, points = {}",
            spec.r_max, spec.points
        )));
    }
    let residuals: Vec<(usize, f64)> =
        [1, 2, 4].iter().map(|k| (k * spec.points, profile_fd_residual(spec.r_max, k * spec.points))).collect();
    let residual_order = (residuals[1].1 / residuals[2].1).log2();

    let mut breaks = vec![0.0];
    let mut b = 0.125;
    while b < spec.r_max {
        breaks.push(b);
        b *= 2.0;
    }
    breaks.push(spec.r_max);
    let body = integrate_with_breaks(|r| 2.0 * PI * r * (4.0 * PI * profile(r)).exp(), &breaks, 1e-16, 1e-14)?;
    let mass_tail = 2.0 / (1.0 + 0.5 * PI * spec.r_max * spec.r_max);

    let dr = spec.r_max / spec.points as f64;
    let monotone = (0..spec.points).all(|i| profile((i + 1) as f64 * dr) < profile(i as f64 * dr));
    Ok(ProfileReport {
        r_max: spec.r_max,
        points: spec.points,
        max_residual: residuals[0].1,
        residuals,
        residual_order,
        mass: body + mass_tail,
        mass_tail,
        phi0: profile(0.0),
        monotone,
        laplacian_at_1: -profile_d2(1.0) - profile_d1(1.0),
        source_at_1: (4.0 * PI * profile(1.0)).exp(),
    })
}

/// Annulus `Rr_eps < |y| < delta` with boundary values i_eps inside and
/// s_eps outside.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnulusCapacitySpec {
    pub delta: f64,
    pub rr_eps: f64,
    pub s_eps: f64,
    pub i_eps: f64,
}

impl AnnulusCapacitySpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.rr_eps > 0.0 && self.rr_eps < self.delta) || !self.delta.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "annulus needs 0 < Rr_eps < delta, got Rr_eps = {}, delta = {}",
                self.rr_eps, self.delta
            )));
        }
        if !(self.s_eps <= self.i_eps) {
            return Err(Error::InvalidParameter(format!("need s_eps <= i_eps, got {} > {}", self.s_eps, self.i_eps)));
        }
        Ok(())
    }

    fn log_ratio(&self) -> f64 {
        self.delta.ln() - self.rr_eps.ln()
    }

    /// The harmonic interpolant of the two boundary values.
    pub fn h_tilde(&self, r: f64) -> f64 {
        (self.s_eps * (r.ln() - self.rr_eps.ln()) + self.i_eps * (self.delta.ln() - r.ln())) / self.log_ratio()
    }

    /// `2 pi (s - i)^2 / (log delta - log Rr)`.
    pub fn closed_form_energy(&self) -> f64 {
        2.0 * PI * (self.s_eps - self.i_eps).powi(2) / self.log_ratio()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CapacityReport {
    pub spec: AnnulusCapacitySpec,
    pub energy_quadrature: f64,
    pub energy_closed_form: f64,
    pub abs_diff: f64,
    /// |h(Rr) - i| and |h(delta) - s|.
    pub inner_value_error: f64,
    pub outer_value_error: f64,
}

pub fn annulus_capacity(spec: &AnnulusCapacitySpec) -> Result<CapacityReport> {
    spec.validate()?;
    let l = spec.log_ratio();
    let (s, i) = (spec.s_eps, spec.i_eps);
    let dh = |r: f64| (s / r - i / r) / l;
    let pieces = 32;
    let breaks: Vec<f64> =
        (0..=pieces).map(|k| (spec.rr_eps.ln() + l * k as f64 / pieces as f64).exp()).collect();
    let energy_quadrature = integrate_with_breaks(|r| 2.0 * PI * r * dh(r).powi(2), &breaks, 1e-15, 1e-14)?;
    let energy_closed_form = spec.closed_form_energy();
    Ok(CapacityReport {
        spec: *spec,
        energy_quadrature,
        energy_closed_form,
        abs_diff: (energy_quadrature - energy_closed_form).abs(),
        inner_value_error: (spec.h_tilde(spec.rr_eps) - i).abs(),
        outer_value_error: (spec.h_tilde(spec.delta) - s).abs(),
    })
}

/// Half-disk frame at p: `x - p = r (cos t theta + sin theta n)` with
/// theta in (0, pi) pointing into the domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LocalModel {
    pub p: Point,
    pub tangent: Point,
    pub normal: Point,
    pub a_p: f64,
    /// Tangential part of the fitted slope of the regular part.
    pub slope_t: f64,
}

impl LocalModel {
    /// Frame from the two boundary edges at p and constants from the Green fit.
    pub fn from_green(mesh: &Mesh, green: &GreenResult) -> Result<Self> {
        let node = green.node_id;
        let x = mesh.nodes();
        let incoming = mesh.boundary_edges().iter().find(|e| e.nodes[1] == node);
        let outgoing = mesh.boundary_edges().iter().find(|e| e.nodes[0] == node);
        let (Some(a), Some(b)) = (incoming, outgoing) else {
            return Err(Error::InvalidParameter(format!("node {node} is not on a boundary loop")));
        };
        let unit = |u: Point| {
            let n = (u[0] * u[0] + u[1] * u[1]).sqrt();
            [u[0] / n, u[1] / n]
        };
        let p = x[node];
        let d1 = unit([p[0] - x[a.nodes[0]][0], p[1] - x[a.nodes[0]][1]]);
        let d2 = unit([x[b.nodes[1]][0] - p[0], x[b.nodes[1]][1] - p[1]]);
        let t = unit([d1[0] + d2[0], d1[1] + d2[1]]);
        Ok(Self {
            p,
            tangent: t,
            normal: [-t[1], t[0]],
            a_p: green.a_p,
            slope_t: green.fit_slope[0] * t[0] + green.fit_slope[1] * t[1],
        })
    }

    /// Boundary along the x-axis at the origin, domain above.
    pub fn flat(a_p: f64, slope_t: f64) -> Self {
        Self { p: [0.0, 0.0], tangent: [1.0, 0.0], normal: [0.0, 1.0], a_p, slope_t }
    }

    pub fn point(&self, r: f64, theta: f64) -> Point {
        let (s, c) = theta.sin_cos();
        [
            self.p[0] + r * (c * self.tangent[0] + s * self.normal[0]),
            self.p[1] + r * (c * self.tangent[1] + s * self.normal[1]),
        ]
    }

    pub fn green_polar(&self, r: f64, theta: f64) -> f64 {
        -r.ln() / PI + self.a_p + self.slope_t * r * theta.cos()
    }

    pub fn green_at(&self, x: Point) -> f64 {
        let d = [x[0] - self.p[0], x[1] - self.p[1]];
        let r = (d[0] * d[0] + d[1] * d[1]).sqrt();
        -r.ln() / PI + self.a_p + self.slope_t * (d[0] * self.tangent[0] + d[1] * self.tangent[1])
    }

    /// int over the half-circle of radius r0 of `G (-dG/dr) ds`.
    fn arc_flux(&self, r0: f64) -> f64 {
        let (x, w) = gl_on(0.0, PI, 32);
        x.iter()
            .zip(&w)
            .map(|(&th, &wt)| wt * self.green_polar(r0, th) * (1.0 / (PI * r0) - self.slope_t * th.cos()) * r0)
            .sum()
    }
}

fn gl_on(a: f64, b: f64, n: usize) -> (Vec<f64>, Vec<f64>) {
    let (x, w) = gauss_legendre(n);
    let (c, h) = (0.5 * (a + b), 0.5 * (b - a));
    (x.iter().map(|t| c + h * t).collect(), w.iter().map(|v| h * v).collect())
}

/// Cubic smoothstep cut-off: 1 on [0, rho], 0 beyond 2 rho.
fn cutoff(r: f64, rho: f64) -> (f64, f64) {
    if r <= rho {
        (1.0, 0.0)
    } else if r >= 2.0 * rho {
        (0.0, 0.0)
    } else {
        let s = (r - rho) / rho;
        (1.0 - s * s * (3.0 - 2.0 * s), -6.0 * s * (1.0 - s) / rho)
    }
}

/// Integrals of the test function that only involve the half-disk of
/// radius 2 R eps, all in the c-free scaling W = c w.
#[derive(Debug, Clone, Copy)]
struct LocalPieces {
    e_in_quad: f64,
    e_in_closed: f64,
    w_in: f64,
    w2_in: f64,
    w_in_closed: f64,
    w2_in_closed: f64,
    e_annulus: f64,
    w_annulus: f64,
    w2_annulus: f64,
    /// int over the annulus of G^2 and eta beta.
    g2_annulus: f64,
    eta_beta_annulus: f64,
    a22: f64,
    a23: f64,
    arc_inner: f64,
    arc_outer: f64,
    /// int over the inner half-disk of G and G^2.
    g_ball: f64,
    g2_ball: f64,
}

struct Radii {
    eps: f64,
    big_r: f64,
    rho: f64,
    k0: f64,
}

impl Radii {
    fn new(eps: f64, a_p: f64) -> Self {
        let big_r = -eps.ln();
        let rho = big_r * eps;
        let k0 = (0.5 * PI * big_r * big_r).ln_1p() / (2.0 * PI) - rho.ln() / PI + a_p;
        Self { eps, big_r, rho, k0 }
    }

    fn psi(&self, r: f64) -> f64 {
        -(0.5 * PI * (r / self.eps).powi(2)).ln_1p() / (2.0 * PI)
    }

    fn psi_d1(&self, r: f64) -> f64 {
        -r / (2.0 * self.eps * self.eps + PI * r * r)
    }

    fn inner_breaks(&self) -> Vec<f64> {
        let mut b = vec![0.0];
        let mut x = self.eps / 8.0;
        while x < self.rho {
            b.push(x);
            x *= 2.0;
        }
        b.push(self.rho);
        b
    }
}

fn local_pieces(model: &LocalModel, rad: &Radii) -> Result<LocalPieces> {
    let rho = rad.rho;
    let k0 = rad.k0;
    let breaks = rad.inner_breaks();
    let e_in_quad = integrate_with_breaks(|r| PI * r * rad.psi_d1(r).powi(2), &breaks, 1e-300, 1e-14)?;
    let w_in = integrate_with_breaks(|r| PI * r * (rad.psi(r) + k0), &breaks, 1e-300, 1e-14)?;
    let w2_in = integrate_with_breaks(|r| PI * r * (rad.psi(r) + k0).powi(2), &breaks, 1e-300, 1e-14)?;

    let t_big = 0.5 * PI * rad.big_r * rad.big_r;
    let e_in_closed =
        ((PI * rad.big_r * rad.big_r + 2.0).ln() - 2f64.ln() - PI * rad.big_r * rad.big_r / (PI * rad.big_r * rad.big_r + 2.0))
            / (2.0 * PI);
    let a = PI / (2.0 * rad.eps * rad.eps);
    let tt = 1.0 + t_big;
    let lt = t_big.ln_1p();
    let i1 = (tt * lt - t_big) / (2.0 * a);
    let i2 = (tt * lt * lt - 2.0 * tt * lt + 2.0 * t_big) / (2.0 * a);
    let w_in_closed = PI * (-i1 / (2.0 * PI) + k0 * rho * rho / 2.0);
    let w2_in_closed = PI * (i2 / (4.0 * PI * PI) - k0 / PI * i1 + k0 * k0 * rho * rho / 2.0);

    let (th, wth) = gl_on(0.0, PI, 32);
    let mut acc = [0.0; 8];
    for q in 0..4 {
        let (rs, wr) = gl_on(rho * (1.0 + q as f64 / 4.0), rho * (1.0 + (q + 1) as f64 / 4.0), 16);
        for (&r, &wrr) in rs.iter().zip(&wr) {
            let (eta, deta) = cutoff(r, rho);
            for (&t, &wt) in th.iter().zip(&wth) {
                let (s, c) = t.sin_cos();
                let w = wrr * wt * r;
                let beta = model.slope_t * r * c;
                let g = model.green_polar(r, t);
                // gradients in the (t, n) frame
                let grad_g = [-c / (PI * r) + model.slope_t, -s / (PI * r)];
                let grad_eb = [eta * model.slope_t + deta * beta * c, deta * beta * s];
                let grad_w = [grad_g[0] - grad_eb[0], grad_g[1] - grad_eb[1]];
                let wv = g - eta * beta;
                acc[0] += w * (grad_w[0] * grad_w[0] + grad_w[1] * grad_w[1]);
                acc[1] += w * wv;
                acc[2] += w * wv * wv;
                acc[4] += w * g * g;
                acc[5] += w * eta * beta;
                acc[6] += -2.0 * w * (grad_g[0] * grad_eb[0] + grad_g[1] * grad_eb[1]);
                acc[7] += w * (grad_eb[0] * grad_eb[0] + grad_eb[1] * grad_eb[1]);
            }
        }
    }
    let g_ball = integrate_with_breaks(|r| PI * r * (-r.ln() / PI + model.a_p), &breaks, 1e-300, 1e-13)?;
    let g2_ball = integrate_with_breaks(
        |r| PI * r * (-r.ln() / PI + model.a_p).powi(2) + 0.5 * PI * model.slope_t.powi(2) * r.powi(3),
        &breaks,
        1e-300,
        1e-13,
    )?;
    Ok(LocalPieces {
        e_in_quad,
        e_in_closed,
        w_in,
        w2_in,
        w_in_closed,
        w2_in_closed,
        e_annulus: acc[0],
        w_annulus: acc[1],
        w2_annulus: acc[2],
        g2_annulus: acc[4],
        eta_beta_annulus: acc[5],
        a22: acc[6],
        a23: acc[7],
        arc_inner: model.arc_flux(rho),
        arc_outer: model.arc_flux(2.0 * rho),
        g_ball,
        g2_ball,
    })
}

/// Integration of functions of G over `Omega \ B_rho(p)`: polar
/// coordinates on the triangles at p, graded subdivision on triangles
/// close to p, the 7-point rule elsewhere. Inside `r_model` the Green
/// function is the local model, outside it is the singular part plus the
/// interpolated FEM regular part.
struct OuterQuadrature<'a> {
    mesh: &'a Mesh,
    regular: &'a [f64],
    node: usize,
    model: LocalModel,
    rho: f64,
    r_model: f64,
}

impl OuterQuadrature<'_> {
    fn green(&self, x: Point, t: usize) -> f64 {
        let r = dist(x, self.model.p);
        if r < self.r_model {
            return self.model.green_at(x);
        }
        let tri = self.mesh.triangles()[t];
        let l = barycentric(self.mesh.triangle_points(t), x);
        -r.ln() / PI + l[0] * self.regular[tri[0]] + l[1] * self.regular[tri[1]] + l[2] * self.regular[tri[2]]
    }

    fn integrate<const K: usize>(&self, f: &(impl Fn(f64) -> [f64; K] + Sync)) -> [f64; K] {
        let parts: Vec<[f64; K]> = (0..self.mesh.num_triangles())
            .into_par_iter()
            .map(|t| {
                if self.mesh.triangles()[t].contains(&self.node) {
                    self.polar(t, f)
                } else {
                    let mut acc = [0.0; K];
                    self.graded(t, self.mesh.triangle_points(t), 0, f, &mut acc);
                    acc
                }
            })
            .collect();
        let mut total = [0.0; K];
        for p in &parts {
            for k in 0..K {
                total[k] += p[k];
            }
        }
        total
    }

    fn polar<const K: usize>(&self, t: usize, f: &impl Fn(f64) -> [f64; K]) -> [f64; K] {
        let tri = self.mesh.triangles()[t];
        let x = self.mesh.nodes();
        let p = self.model.p;
        let others: Vec<Point> = tri.iter().filter(|&&i| i != self.node).map(|&i| x[i]).collect();
        let (a, b) = (others[0], others[1]);
        let ua = [a[0] - p[0], a[1] - p[1]];
        let ub = [b[0] - p[0], b[1] - p[1]];
        let span = (ua[0] * ub[1] - ua[1] * ub[0]).atan2(ua[0] * ub[0] + ua[1] * ub[1]);
        let start = ua[1].atan2(ua[0]);
        let e = [b[0] - a[0], b[1] - a[1]];
        let (ths, wths) = gl_on(0.0, span.abs(), 24);
        let mut acc = [0.0; K];
        for (&phi, &wphi) in ths.iter().zip(&wths) {
            let ang = start + span.signum() * phi;
            let d = [ang.cos(), ang.sin()];
            let r_edge = (ua[0] * e[1] - ua[1] * e[0]) / (d[0] * e[1] - d[1] * e[0]);
            if !(r_edge > self.rho) {
                continue;
            }
            let (u0, u1) = (self.rho.ln(), r_edge.ln());
            let pieces = ((u1 - u0) / 0.5).ceil().max(1.0) as usize;
            for q in 0..pieces {
                let lo = u0 + (u1 - u0) * q as f64 / pieces as f64;
                let hi = u0 + (u1 - u0) * (q + 1) as f64 / pieces as f64;
                let (us, wus) = gl_on(lo, hi, 12);
                for (&u, &wu) in us.iter().zip(&wus) {
                    let r = u.exp();
                    let g = self.green([p[0] + r * d[0], p[1] + r * d[1]], t);
                    let v = f(g);
                    for k in 0..K {
                        acc[k] += wphi * wu * r * r * v[k];
                    }
                }
            }
        }
        acc
    }

    fn graded<const K: usize>(
        &self,
        t: usize,
        v: [Point; 3],
        depth: usize,
        f: &impl Fn(f64) -> [f64; K],
        acc: &mut [f64; K],
    ) {
        let p = self.model.p;
        let dmax = v.iter().map(|&q| dist(q, p)).fold(0.0, f64::max);
        if dmax <= self.rho {
            return;
        }
        let dmin = point_triangle_distance(p, v);
        let size = dist(v[0], v[1]).max(dist(v[1], v[2])).max(dist(v[2], v[0]));
        let straddles = dmin < self.rho;
        let limit = if straddles { 9 } else { 6 };
        if depth < limit && (straddles || size > 0.5 * dmin) {
            let m01 = mid(v[0], v[1]);
            let m12 = mid(v[1], v[2]);
            let m20 = mid(v[2], v[0]);
            for sub in [[v[0], m01, m20], [m01, v[1], m12], [m20, m12, v[2]], [m01, m12, m20]] {
                self.graded(t, sub, depth + 1, f, acc);
            }
            return;
        }
        let area = 0.5 * ((v[1][0] - v[0][0]) * (v[2][1] - v[0][1]) - (v[2][0] - v[0][0]) * (v[1][1] - v[0][1])).abs();
        for (l, w) in triangle_rule7() {
            let x = [
                l[0] * v[0][0] + l[1] * v[1][0] + l[2] * v[2][0],
                l[0] * v[0][1] + l[1] * v[1][1] + l[2] * v[2][1],
            ];
            if straddles && dist(x, p) < self.rho {
                continue;
            }
            let val = f(self.green(x, t));
            for k in 0..K {
                acc[k] += w * area * val[k];
            }
        }
    }
}

fn mid(a: Point, b: Point) -> Point {
    [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])]
}

fn point_segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let e = [b[0] - a[0], b[1] - a[1]];
    let len2 = e[0] * e[0] + e[1] * e[1];
    let s = (((p[0] - a[0]) * e[0] + (p[1] - a[1]) * e[1]) / len2).clamp(0.0, 1.0);
    dist(p, [a[0] + s * e[0], a[1] + s * e[1]])
}

fn point_triangle_distance(p: Point, v: [Point; 3]) -> f64 {
    let l = barycentric(v, p);
    if l.iter().all(|&x| x >= 0.0) {
        return 0.0;
    }
    point_segment_distance(p, v[0], v[1]).min(point_segment_distance(p, v[1], v[2])).min(point_segment_distance(p, v[2], v[0]))
}

/// Largest 2 R eps for which the half-disk picture at p is used: a quarter
/// of the radius on a disk, half the distance to the nearest corner on a
/// polygon, and never beyond the inner fit radius where the local model
/// takes over from the FEM field.
pub fn chart_cap(mesh: &Mesh, green: &GreenResult) -> f64 {
    let domain = match mesh.shape() {
        BoundaryShape::Circle { radius, .. } => 0.25 * radius,
        BoundaryShape::Polygonal => mesh
            .boundary_nodes()
            .into_iter()
            .filter(|&i| mesh.is_corner(i))
            .map(|i| 0.5 * dist(mesh.nodes()[i], green.p))
            .fold(0.25 * mesh.area().sqrt(), f64::min),
    };
    domain.min(green.fit_radii.0)
}

#[derive(Debug, Clone, Serialize)]
pub struct MoserTestFunction {
    pub eps: f64,
    /// R = -log eps.
    pub big_r: f64,
    /// R eps, radius of the bubble region.
    pub rho: f64,
    pub alpha: f64,
    pub a_p: f64,
    pub area: f64,
    pub c2: f64,
    pub c2_paper: f64,
    pub c: f64,
    /// Matching constant A.
    pub a: f64,
    /// c w = psi + k0 on the bubble region.
    pub k0: f64,
    pub chart_cap: f64,
    /// c^2 int |grad w|^2.
    pub energy: f64,
    /// Same energy with the bubble term in closed form and the cut-off
    /// annulus through the flux identity of the harmonic model.
    pub energy_alt: f64,
    /// c int w and c^2 int w^2.
    pub w_integral: f64,
    pub w_sq_integral: f64,
    /// ||phi_eps||_{1,alpha}^2 recomputed from `energy_alt`.
    pub norm_check: f64,
    pub model: LocalModel,
}

impl MoserTestFunction {
    fn radii(&self) -> Radii {
        Radii::new(self.eps, self.a_p)
    }

    pub fn cutoff(&self, r: f64) -> f64 {
        cutoff(r, self.rho).0
    }

    /// c w at local polar coordinates, valid inside the model region.
    pub fn cw_local(&self, r: f64, theta: f64) -> f64 {
        if r < self.rho {
            self.radii().psi(r) + self.k0
        } else {
            let beta = self.model.slope_t * r * theta.cos();
            self.model.green_polar(r, theta) - self.cutoff(r) * beta
        }
    }

    pub fn w_local(&self, r: f64, theta: f64) -> f64 {
        self.cw_local(r, theta) / self.c
    }

    /// Inner formula `c + (psi + A)/c`, evaluated without the k0 shortcut.
    pub fn w_inner_formula(&self, r: f64) -> f64 {
        self.c + (self.radii().psi(r) + self.a) / self.c
    }

    /// |Omega|^{-1} int w for normalization constant `c`.
    pub fn mean_shift(&self, c: f64) -> f64 {
        self.w_integral / (c * self.area)
    }

    pub fn appendix_params(&self) -> AppendixParams {
        AppendixParams { eps: self.eps, alpha: self.alpha, area: self.area, model: self.model }
    }
}

/// `-log eps / pi + A_p + (1/2pi) log(pi/2) - 1/(2pi)`.
pub fn c2_paper(eps: f64, a_p: f64) -> f64 {
    -eps.ln() / PI + a_p + (0.5 * PI).ln() / (2.0 * PI) - 1.0 / (2.0 * PI)
}

fn outer_quadrature<'a>(mesh: &'a Mesh, green: &'a GreenResult, model: LocalModel, rho: f64) -> OuterQuadrature<'a> {
    OuterQuadrature {
        mesh,
        regular: &green.regular_part.values,
        node: green.node_id,
        model,
        rho,
        r_model: green.fit_radii.0,
    }
}

/// Assembles w_eps for `eps` and fixes c by `||phi_eps||_{1,alpha} = 1`.
/// The norm is `N / c^2` with N independent of c, so the root is exact;
/// it must fall inside `[0.5, 2] c2_paper`.
pub fn build_test_function(sys: &NeumannSystem, green: &GreenResult, eps: f64) -> Result<MoserTestFunction> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::InvalidParameter(format!("eps must lie in (0, 1), got {eps}")));
    }
    let sp = sys.space();
    let mesh = sp.mesh();
    let model = LocalModel::from_green(mesh, green)?;
    let rad = Radii::new(eps, green.a_p);
    let cap = chart_cap(mesh, green);
    if !(2.0 * rad.rho < cap) {
        return Err(Error::InvalidParameter(format!(
            "eps = {eps} too large: 2 R eps = {:.4e} exceeds the chart cap {cap:.4e}",
            2.0 * rad.rho
        )));
    }
    let lp = local_pieces(&model, &rad)?;
    let oq = outer_quadrature(mesh, green, model, 2.0 * rad.rho);
    let [g_out, g2_out] = oq.integrate(&|g| [g, g * g]);
    let area = sp.area();
    let alpha = green.alpha;
    // Green's identity for G on Omega \ B_{2 R eps}
    let e_out = alpha * g2_out - g_out / area + lp.arc_outer;
    let energy = lp.e_in_quad + lp.e_annulus + e_out;
    let energy_alt = lp.e_in_closed + e_out + (lp.arc_inner - lp.arc_outer) + lp.a22 + lp.a23;
    let w_integral = lp.w_in + lp.w_annulus + g_out;
    let w_sq_integral = lp.w2_in + lp.w2_annulus + g2_out;
    let norm = |e: f64| e - alpha * w_sq_integral + alpha * w_integral * w_integral / area;
    let c2 = norm(energy);
    let c2p = c2_paper(eps, green.a_p);
    if !(c2p > 0.0 && c2 >= 0.5 * c2p && c2 <= 2.0 * c2p) {
        return Err(Error::InvalidParameter(format!(
            "normalization mismatch: c^2 = {c2:.6} lies outside [0.5, 2] x c^2_paper = {c2p:.6}"
        )));
    }
    Ok(MoserTestFunction {
        eps,
        big_r: rad.big_r,
        rho: rad.rho,
        alpha,
        a_p: green.a_p,
        area,
        c2,
        c2_paper: c2p,
        c: c2.sqrt(),
        a: -c2 + rad.k0,
        k0: rad.k0,
        chart_cap: cap,
        energy,
        energy_alt,
        w_integral,
        w_sq_integral,
        norm_check: norm(energy_alt) / c2,
        model,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct LowerBoundReport {
    pub eps: f64,
    pub c2_numeric: f64,
    pub c2_paper: f64,
    #[serde(rename = "A")]
    pub a: f64,
    pub norm_check: f64,
    pub energy_split_rel_diff: f64,
    pub integral: f64,
    pub integral_bubble: f64,
    pub integral_annulus: f64,
    pub integral_outer: f64,
    pub bound_b: f64,
    pub margin: f64,
    /// Same integral with c^2 replaced by c2_paper.
    pub integral_paper: f64,
    pub margin_paper: f64,
    /// int phi_eps dx.
    pub phi_integral: f64,
}

/// `int_Omega exp(2 pi phi_eps^2)` for normalization `c`, split into the
/// bubble, the cut-off annulus and the rest.
fn exp_integral(mesh: &Mesh, green: &GreenResult, tf: &MoserTestFunction, c: f64) -> Result<[f64; 3]> {
    let rad = tf.radii();
    let m = tf.mean_shift(c);
    let e0 = 2.0 * PI * (rad.k0 / c - m).powi(2);
    if e0 > MAX_EXPONENT {
        let t = mesh.triangles().iter().position(|t| t.contains(&green.node_id)).unwrap_or(0);
        return Err(Error::Overflow { triangle: t, exponent: e0, max_abs: rad.k0 / c });
    }
    let bubble = integrate_with_breaks(
        |r| PI * r * (2.0 * PI * ((rad.psi(r) + rad.k0) / c - m).powi(2)).exp(),
        &rad.inner_breaks(),
        1e-300,
        1e-13,
    )?;
    let (th, wth) = gl_on(0.0, PI, 32);
    let mut annulus = 0.0;
    for q in 0..4 {
        let (rs, wr) = gl_on(tf.rho * (1.0 + q as f64 / 4.0), tf.rho * (1.0 + (q + 1) as f64 / 4.0), 16);
        for (&r, &wrr) in rs.iter().zip(&wr) {
            for (&t, &wt) in th.iter().zip(&wth) {
                annulus += wrr * wt * r * (2.0 * PI * (tf.cw_local(r, t) / c - m).powi(2)).exp();
            }
        }
    }
    let oq = outer_quadrature(mesh, green, tf.model, 2.0 * tf.rho);
    let [outer] = oq.integrate(&|g| [(2.0 * PI * (g / c - m).powi(2)).exp()]);
    if !outer.is_finite() {
        return Err(Error::Overflow { triangle: 0, exponent: f64::INFINITY, max_abs: f64::NAN });
    }
    Ok([bubble, annulus, outer])
}

/// Compares `int exp(2 pi phi_eps^2)` with `|Omega| + (pi/2) e^{1 + 2 pi A_p}`.
pub fn check_lower_bound(sys: &NeumannSystem, green: &GreenResult, tf: &MoserTestFunction) -> Result<LowerBoundReport> {
    if dist(tf.model.p, green.p) > 0.0 || tf.alpha != green.alpha || tf.a_p != green.a_p {
        return Err(Error::InvalidParameter("test function and Green function do not share p, alpha and A_p".into()));
    }
    let mesh = sys.space().mesh();
    let [b, a, o] = exp_integral(mesh, green, tf, tf.c)?;
    let integral = b + a + o;
    let paper = exp_integral(mesh, green, tf, tf.c2_paper.sqrt())?.iter().sum::<f64>();
    let bound_b = theorem_bound(tf.area, green.a_p);
    Ok(LowerBoundReport {
        eps: tf.eps,
        c2_numeric: tf.c2,
        c2_paper: tf.c2_paper,
        a: tf.a,
        norm_check: tf.norm_check,
        energy_split_rel_diff: (tf.energy - tf.energy_alt).abs() / tf.energy,
        integral,
        integral_bubble: b,
        integral_annulus: a,
        integral_outer: o,
        bound_b,
        margin: integral - bound_b,
        integral_paper: paper,
        margin_paper: paper - bound_b,
        phi_integral: tf.w_integral / tf.c - tf.mean_shift(tf.c) * tf.area,
    })
}

/// Builds and checks the test function for every eps of the grid.
pub fn lower_bound_sweep(sys: &NeumannSystem, green: &GreenResult, eps_grid: &[f64]) -> Result<Vec<LowerBoundReport>> {
    eps_grid
        .iter()
        .map(|&eps| {
            let tf = build_test_function(sys, green, eps)?;
            check_lower_bound(sys, green, &tf)
        })
        .collect()
}

/// Inputs of the appendix estimates; everything lives in the half-disk
/// of radius 2 R eps, so no mesh is needed.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct AppendixParams {
    pub eps: f64,
    pub alpha: f64,
    pub area: f64,
    pub model: LocalModel,
}

#[derive(Debug, Clone, Serialize)]
pub struct AppendixItem {
    pub eps: f64,
    pub item: String,
    /// In the c-free scaling: c int w, c^2 int w^2, c^2 int |grad w|^2.
    pub value: f64,
    /// Closed form or leading term; NaN where the estimate has none.
    pub reference: f64,
    pub abs_diff: f64,
    /// The order the estimate claims, e.g. (R eps)^2 |log(R eps)|.
    pub scale: f64,
    /// |value - leading term| / scale.
    pub k: f64,
    pub error: Option<String>,
}

pub const APPENDIX_ITEMS: [&str; 8] = [
    "A1-inner-gradient",
    "A2-outer-gradient",
    "B1-inner-mean",
    "B2-outer-mean",
    "B-total",
    "C1-inner-square",
    "C2-outer-square",
    "C-total",
];

/// Appendix integrals for one eps. Outer pieces use `int_Omega G = 0` and
/// Green's identity, so only the half-disk near p is integrated.
pub fn appendix_integrals(params: &AppendixParams) -> Vec<AppendixItem> {
    let eps = params.eps;
    let item = |name: &str, value: f64, reference: f64, scale: f64, lead: f64| AppendixItem {
        eps,
        item: name.into(),
        value,
        reference,
        abs_diff: if reference.is_nan() { f64::NAN } else { (value - reference).abs() },
        scale,
        k: (value - lead).abs() / scale,
        error: None,
    };
    let rad = Radii::new(eps, params.model.a_p);
    let lp = match local_pieces(&params.model, &rad) {
        Ok(lp) => lp,
        Err(e) => {
            return APPENDIX_ITEMS
                .iter()
                .map(|n| AppendixItem {
                    eps,
                    item: (*n).into(),
                    value: f64::NAN,
                    reference: f64::NAN,
                    abs_diff: f64::NAN,
                    scale: f64::NAN,
                    k: f64::NAN,
                    error: Some(e.to_string()),
                })
                .collect()
        }
    };
    let rho = rad.rho;
    let lr = rho.ln().abs();
    let s_grad = rho * lr;
    let s_mean = rho * rho * lr;
    let s_sq = rho * rho * lr * lr;
    let a2 = -params.alpha * lp.g2_ball + lp.g_ball / params.area + lp.arc_inner + lp.a22 + lp.a23;
    let b2 = -lp.g_ball - lp.eta_beta_annulus;
    let c2 = -lp.g2_ball + (lp.w2_annulus - lp.g2_annulus);
    vec![
        item(APPENDIX_ITEMS[0], lp.e_in_quad, lp.e_in_closed, 1.0, lp.e_in_closed),
        item(APPENDIX_ITEMS[1], a2, -rho.ln() / PI + params.model.a_p, s_grad, -rho.ln() / PI + params.model.a_p),
        item(APPENDIX_ITEMS[2], lp.w_in, lp.w_in_closed, s_mean, 0.0),
        item(APPENDIX_ITEMS[3], b2, f64::NAN, s_mean, 0.0),
        item(APPENDIX_ITEMS[4], lp.w_in + b2, f64::NAN, s_mean, 0.0),
        item(APPENDIX_ITEMS[5], lp.w2_in, lp.w2_in_closed, s_sq, 0.0),
        item(APPENDIX_ITEMS[6], c2, f64::NAN, s_sq, 0.0),
        item(APPENDIX_ITEMS[7], lp.w2_in + c2, f64::NAN, s_sq, 0.0),
    ]
}

/// Ratio max K / min K of one item over an eps sweep.
pub fn order_constant_spread(items: &[AppendixItem], name: &str) -> f64 {
    let ks: Vec<f64> = items.iter().filter(|i| i.item == name).map(|i| i.k).collect();
    let max = ks.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = ks.iter().cloned().fold(f64::INFINITY, f64::min);
    max / min
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profile_basics() {
        assert_eq!(profile(0.0), 0.0);
        assert!(profile(1.0) < 0.0 && profile(2.0) < profile(1.0));
        let h = 1e-4;
        let fd = (profile(0.7 + h) - profile(0.7 - h)) / (2.0 * h);
        assert!((fd - profile_d1(0.7)).abs() < 1e-8);
        let fd2 = (profile_d1(0.7 + h) - profile_d1(0.7 - h)) / (2.0 * h);
        assert!((fd2 - profile_d2(0.7)).abs() < 1e-8);
    }

    #[test]
    fn coarse_profile_grid_is_rejected() {
        assert!(verify_profile(&BlowupProfile { r_max: 100.0, points: 20_000 }).is_err());
        assert!(verify_profile(&BlowupProfile { r_max: 1e3, points: 500 }).is_err());
    }

    #[test]
    fn capacity_spec_validation() {
        let ok = AnnulusCapacitySpec { delta: 1.0, rr_eps: 0.1, s_eps: 0.0, i_eps: 1.0 };
        assert!(ok.validate().is_ok());
        assert!(AnnulusCapacitySpec { rr_eps: 2.0, ..ok }.validate().is_err());
        assert!(AnnulusCapacitySpec { s_eps: 2.0, ..ok }.validate().is_err());
        assert!((ok.h_tilde(0.1) - 1.0).abs() < 1e-15 && ok.h_tilde(1.0).abs() < 1e-15);
    }

    #[test]
    fn cutoff_is_c1() {
        let rho = 0.01;
        assert_eq!(cutoff(0.5 * rho, rho), (1.0, 0.0));
        assert_eq!(cutoff(3.0 * rho, rho), (0.0, 0.0));
        let (e1, d1) = cutoff(rho * (1.0 + 1e-9), rho);
        let (e2, d2) = cutoff(rho * (2.0 - 1e-9), rho);
        assert!((e1 - 1.0).abs() < 1e-12 && e2.abs() < 1e-12);
        assert!(d1.abs() < 1e-5 && d2.abs() < 1e-5);
        let (_, dm) = cutoff(1.5 * rho, rho);
        assert!((dm + 1.5 / rho).abs() < 1e-9);
    }

    #[test]
    fn flat_model_arc_flux_leading_term() {
        let m = LocalModel::flat(0.1, 0.0);
        let r0 = 1e-3;
        assert!((m.arc_flux(r0) - (-r0.ln() / PI + 0.1)).abs() < 1e-12);
    }

    #[test]
    fn inner_closed_forms_match_quadrature() {
        let model = LocalModel::flat(0.04, 0.3);
        for eps in [1e-2, 1e-4] {
            let lp = local_pieces(&model, &Radii::new(eps, 0.04)).unwrap();
            assert!((lp.e_in_quad - lp.e_in_closed).abs() < 1e-12 * lp.e_in_closed);
            assert!((lp.w_in - lp.w_in_closed).abs() < 1e-9 * lp.w_in.abs());
            assert!((lp.w2_in - lp.w2_in_closed).abs() < 1e-9 * lp.w2_in);
            // harmonic model: annulus energy of G equals the flux difference
            let direct = lp.e_annulus - lp.a22 - lp.a23;
            assert!((direct - (lp.arc_inner - lp.arc_outer)).abs() < 1e-10 * direct);
        }
    }
}
