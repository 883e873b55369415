//! Computational domains and their conforming triangulations.
//!
//! Three domain kinds are supported: the unit square (structured
//! "union-jack" grid), disks (structured radial rings with eight sectors,
//! invariant under rotation by a quarter turn) and simple polygons (ear
//! clipping followed by uniform refinement). Indexing is 0-based and fully
//! deterministic.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type Point = [f64; 2];

/// Number of angular sectors of the radial disk mesh. Ring `k` carries
/// `DISK_SECTORS * k` nodes.
pub const DISK_SECTORS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DomainKind {
    UnitSquare,
    Disk { radius: f64 },
    Polygon { vertices: Vec<Point> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    #[serde(flatten)]
    pub kind: DomainKind,
    pub target_h: f64,
}

impl DomainSpec {
    pub fn unit_square(target_h: f64) -> Self {
        Self { kind: DomainKind::UnitSquare, target_h }
    }

    pub fn disk(radius: f64, target_h: f64) -> Self {
        Self { kind: DomainKind::Disk { radius }, target_h }
    }

    pub fn polygon(vertices: Vec<Point>, target_h: f64) -> Self {
        Self { kind: DomainKind::Polygon { vertices }, target_h }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.target_h > 0.0) || !self.target_h.is_finite() {
            return Err(Error::InvalidDomain(format!("target_h must be positive, got {}", self.target_h)));
        }
        match &self.kind {
            DomainKind::UnitSquare => Ok(()),
            DomainKind::Disk { radius } => {
                if *radius > 0.0 && radius.is_finite() {
                    Ok(())
                } else {
                    Err(Error::InvalidDomain(format!("disk radius must be positive, got {radius}")))
                }
            }
            DomainKind::Polygon { vertices } => validate_polygon(vertices),
        }
    }
}

/// How the boundary should be treated when refining.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BoundaryShape {
    Polygonal,
    Circle { center: Point, radius: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundaryEdge {
    /// Oriented so that the domain lies to the left.
    pub nodes: [usize; 2],
    pub tag: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryPoint {
    pub node_id: usize,
    pub coords: Point,
}

#[derive(Debug, Clone)]
pub struct Mesh {
    nodes: Vec<Point>,
    triangles: Vec<[usize; 3]>,
    boundary_edges: Vec<BoundaryEdge>,
    area: f64,
    shape: BoundaryShape,
}

pub fn signed_area(a: Point, b: Point, c: Point) -> f64 {
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
}

pub fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn polygon_signed_area(v: &[Point]) -> f64 {
    let n = v.len();
    0.5 * (0..n).map(|i| v[i][0] * v[(i + 1) % n][1] - v[(i + 1) % n][0] * v[i][1]).sum::<f64>()
}

fn segments_intersect(p1: Point, p2: Point, q1: Point, q2: Point) -> bool {
    let d1 = signed_area(q1, q2, p1);
    let d2 = signed_area(q1, q2, p2);
    let d3 = signed_area(p1, p2, q1);
    let d4 = signed_area(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    let on_seg = |a: Point, b: Point, p: Point, d: f64| {
        d == 0.0
            && p[0] >= a[0].min(b[0])
            && p[0] <= a[0].max(b[0])
            && p[1] >= a[1].min(b[1])
            && p[1] <= a[1].max(b[1])
    };
    on_seg(q1, q2, p1, d1) || on_seg(q1, q2, p2, d2) || on_seg(p1, p2, q1, d3) || on_seg(p1, p2, q2, d4)
}

fn validate_polygon(v: &[Point]) -> Result<()> {
    if v.len() < 3 {
        return Err(Error::InvalidDomain(format!("polygon needs at least 3 vertices, got {}", v.len())));
    }
    if v.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
        return Err(Error::InvalidDomain("polygon has non-finite coordinates".into()));
    }
    let area = polygon_signed_area(v);
    if area.abs() <= 1e-14 {
        return Err(Error::InvalidDomain("polygon has zero area".into()));
    }
    if area < 0.0 {
        return Err(Error::InvalidDomain("polygon is clockwise; vertices must be positively oriented".into()));
    }
    let n = v.len();
    for i in 0..n {
        if dist(v[i], v[(i + 1) % n]) == 0.0 {
            return Err(Error::InvalidDomain(format!("repeated vertex {i}")));
        }
        for j in i + 1..n {
            let adjacent = j == i + 1 || (i == 0 && j == n - 1);
            if adjacent {
                continue;
            }
            if segments_intersect(v[i], v[(i + 1) % n], v[j], v[(j + 1) % n]) {
                return Err(Error::InvalidDomain(format!("polygon self-intersects: edges {i} and {j}")));
            }
        }
    }
    Ok(())
}

/// Ear clipping for a simple, counter-clockwise polygon.
fn ear_clip(v: &[Point]) -> Result<Vec<[usize; 3]>> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    let mut tris = Vec::with_capacity(v.len() - 2);
    while idx.len() > 3 {
        let m = idx.len();
        let mut clipped = false;
        for k in 0..m {
            let (a, b, c) = (idx[(k + m - 1) % m], idx[k], idx[(k + 1) % m]);
            if signed_area(v[a], v[b], v[c]) <= 0.0 {
                continue;
            }
            let inside = idx.iter().any(|&q| {
                q != a
                    && q != b
                    && q != c
                    && signed_area(v[a], v[b], v[q]) >= 0.0
                    && signed_area(v[b], v[c], v[q]) >= 0.0
                    && signed_area(v[c], v[a], v[q]) >= 0.0
            });
            if inside {
                continue;
            }
            tris.push([a, b, c]);
            idx.remove(k);
            clipped = true;
            break;
        }
        if !clipped {
            return Err(Error::InvalidDomain("ear clipping failed; polygon is not simple".into()));
        }
    }
    tris.push([idx[0], idx[1], idx[2]]);
    Ok(tris)
}

fn unit_square_mesh(target_h: f64) -> Mesh {
    let mut n = (1.0 / target_h).ceil().max(1.0) as usize;
    if n % 2 == 1 {
        n += 1;
    }
    let id = |i: usize, j: usize| j * (n + 1) + i;
    let h = 1.0 / n as f64;
    let nodes: Vec<Point> = (0..=n).flat_map(|j| (0..=n).map(move |i| [i as f64 * h, j as f64 * h])).collect();
    let mut triangles = Vec::with_capacity(2 * n * n);
    for j in 0..n {
        for i in 0..n {
            let (a, b, c, d) = (id(i, j), id(i + 1, j), id(i + 1, j + 1), id(i, j + 1));
            if (i + j) % 2 == 0 {
                triangles.push([a, b, c]);
                triangles.push([a, c, d]);
            } else {
                triangles.push([a, b, d]);
                triangles.push([b, c, d]);
            }
        }
    }
    let mut boundary_edges = Vec::with_capacity(4 * n);
    for i in 0..n {
        boundary_edges.push(BoundaryEdge { nodes: [id(i, 0), id(i + 1, 0)], tag: 0 });
    }
    for j in 0..n {
        boundary_edges.push(BoundaryEdge { nodes: [id(n, j), id(n, j + 1)], tag: 1 });
    }
    for i in (0..n).rev() {
        boundary_edges.push(BoundaryEdge { nodes: [id(i + 1, n), id(i, n)], tag: 2 });
    }
    for j in (0..n).rev() {
        boundary_edges.push(BoundaryEdge { nodes: [id(0, j + 1), id(0, j)], tag: 3 });
    }
    Mesh::from_parts_unchecked(nodes, triangles, boundary_edges, BoundaryShape::Polygonal)
}

fn disk_mesh(radius: f64, target_h: f64) -> Mesh {
    let rings = (radius / target_h).ceil().max(1.0) as usize;
    let s = DISK_SECTORS;
    let ring_start = |k: usize| if k == 0 { 0 } else { 1 + s * k * (k - 1) / 2 };
    let ring_id = |k: usize, j: usize| if k == 0 { 0 } else { ring_start(k) + j % (s * k) };
    let mut nodes = vec![[0.0, 0.0]];
    for k in 1..=rings {
        let r = radius * k as f64 / rings as f64;
        let m = s * k;
        for j in 0..m {
            let t = 2.0 * std::f64::consts::PI * j as f64 / m as f64;
            nodes.push([r * t.cos(), r * t.sin()]);
        }
    }
    let mut triangles = Vec::new();
    for j in 0..s {
        triangles.push([0, ring_id(1, j), ring_id(1, j + 1)]);
    }
    for k in 2..=rings {
        let ki = k - 1;
        for q in 0..s {
            let (mut i, mut o) = (0usize, 0usize);
            while i < ki || o < k {
                let inner = ring_id(ki, q * ki + i);
                let outer = ring_id(k, q * k + o);
                // advance along the outer ring while its next node has the smaller angle
                let take_outer = o < k && (i == ki || (o + 1) * ki < (i + 1) * k);
                if take_outer {
                    triangles.push([inner, outer, ring_id(k, q * k + o + 1)]);
                    o += 1;
                } else {
                    triangles.push([inner, outer, ring_id(ki, q * ki + i + 1)]);
                    i += 1;
                }
            }
        }
    }
    let m = s * rings;
    let boundary_edges =
        (0..m).map(|j| BoundaryEdge { nodes: [ring_id(rings, j), ring_id(rings, j + 1)], tag: 0 }).collect();
    Mesh::from_parts_unchecked(
        nodes,
        triangles,
        boundary_edges,
        BoundaryShape::Circle { center: [0.0, 0.0], radius },
    )
}

fn polygon_mesh(vertices: &[Point], target_h: f64) -> Result<Mesh> {
    let triangles = ear_clip(vertices)?;
    let n = vertices.len();
    let boundary_edges = (0..n).map(|i| BoundaryEdge { nodes: [i, (i + 1) % n], tag: i }).collect();
    let mut mesh = Mesh::from_parts_unchecked(vertices.to_vec(), triangles, boundary_edges, BoundaryShape::Polygonal);
    while mesh.max_edge_length() > 1.5 * target_h {
        mesh = refine(&mesh);
    }
    Ok(mesh)
}

/// Builds a conforming triangulation with maximum edge length at most
/// `1.5 * target_h`.
pub fn build_mesh(spec: &DomainSpec) -> Result<Mesh> {
    spec.validate()?;
    let mesh = match &spec.kind {
        DomainKind::UnitSquare => unit_square_mesh(spec.target_h),
        DomainKind::Disk { radius } => disk_mesh(*radius, spec.target_h),
        DomainKind::Polygon { vertices } => polygon_mesh(vertices, spec.target_h)?,
    };
    mesh.check_invariants()?;
    Ok(mesh)
}

/// Regular refinement: every triangle is split into four. Boundary midpoints
/// of circular domains are projected back onto the circle.
pub fn refine(mesh: &Mesh) -> Mesh {
    let mut nodes = mesh.nodes.clone();
    let mut midpoint: HashMap<(usize, usize), usize> = HashMap::new();
    let boundary_set: HashMap<(usize, usize), ()> =
        mesh.boundary_edges.iter().map(|e| ((e.nodes[0].min(e.nodes[1]), e.nodes[0].max(e.nodes[1])), ())).collect();
    let mut mid = |a: usize, b: usize, nodes: &mut Vec<Point>| -> usize {
        let key = (a.min(b), a.max(b));
        *midpoint.entry(key).or_insert_with(|| {
            let (pa, pb) = (nodes[a], nodes[b]);
            let mut m = [0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1])];
            if let BoundaryShape::Circle { center, radius } = mesh.shape {
                if boundary_set.contains_key(&key) {
                    let d = dist(m, center);
                    m = [center[0] + (m[0] - center[0]) * radius / d, center[1] + (m[1] - center[1]) * radius / d];
                }
            }
            nodes.push(m);
            nodes.len() - 1
        })
    };
    let mut triangles = Vec::with_capacity(4 * mesh.triangles.len());
    for &[a, b, c] in &mesh.triangles {
        let ab = mid(a, b, &mut nodes);
        let bc = mid(b, c, &mut nodes);
        let ca = mid(c, a, &mut nodes);
        triangles.push([a, ab, ca]);
        triangles.push([ab, b, bc]);
        triangles.push([ca, bc, c]);
        triangles.push([ab, bc, ca]);
    }
    let mut boundary_edges = Vec::with_capacity(2 * mesh.boundary_edges.len());
    for e in &mesh.boundary_edges {
        let m = mid(e.nodes[0], e.nodes[1], &mut nodes);
        boundary_edges.push(BoundaryEdge { nodes: [e.nodes[0], m], tag: e.tag });
        boundary_edges.push(BoundaryEdge { nodes: [m, e.nodes[1]], tag: e.tag });
    }
    Mesh::from_parts_unchecked(nodes, triangles, boundary_edges, mesh.shape)
}

/// Boundary node nearest to `hint`; ties go to the smallest node index.
pub fn pick_boundary_point(mesh: &Mesh, hint: Point) -> BoundaryPoint {
    let mut best: Option<(f64, usize)> = None;
    for id in mesh.boundary_nodes() {
        let d = dist(mesh.nodes[id], hint);
        match best {
            Some((bd, bi)) if d > bd || (d == bd && id > bi) => {}
            _ => best = Some((d, id)),
        }
    }
    let (_, node_id) = best.expect("mesh has a boundary");
    BoundaryPoint { node_id, coords: mesh.nodes[node_id] }
}

impl Mesh {
    fn from_parts_unchecked(
        nodes: Vec<Point>,
        triangles: Vec<[usize; 3]>,
        boundary_edges: Vec<BoundaryEdge>,
        shape: BoundaryShape,
    ) -> Self {
        let area = triangles.iter().map(|t| signed_area(nodes[t[0]], nodes[t[1]], nodes[t[2]])).sum();
        Self { nodes, triangles, boundary_edges, area, shape }
    }

    /// Assembles a mesh from raw parts and checks its invariants.
    pub fn from_parts(nodes: Vec<Point>, triangles: Vec<[usize; 3]>, boundary_edges: Vec<[usize; 2]>) -> Result<Self> {
        if let Some(t) = triangles.iter().flatten().chain(boundary_edges.iter().flatten()).find(|&&i| i >= nodes.len())
        {
            return Err(Error::Parse(format!("node index {t} out of range")));
        }
        let edges = boundary_edges.into_iter().map(|nodes| BoundaryEdge { nodes, tag: 0 }).collect();
        let mesh = Self::from_parts_unchecked(nodes, triangles, edges, BoundaryShape::Polygonal);
        mesh.check_invariants()?;
        Ok(mesh)
    }

    pub fn nodes(&self) -> &[Point] {
        &self.nodes
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn boundary_edges(&self) -> &[BoundaryEdge] {
        &self.boundary_edges
    }

    pub fn shape(&self) -> BoundaryShape {
        self.shape
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_triangles(&self) -> usize {
        self.triangles.len()
    }

    /// Total measure |Omega|.
    pub fn area(&self) -> f64 {
        self.area
    }

    pub fn triangle_points(&self, t: usize) -> [Point; 3] {
        let [a, b, c] = self.triangles[t];
        [self.nodes[a], self.nodes[b], self.nodes[c]]
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangle_points(t);
        signed_area(a, b, c)
    }

    /// Unique undirected edges, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut e: Vec<(usize, usize)> = self
            .triangles
            .iter()
            .flat_map(|t| [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])])
            .map(|(a, b)| (a.min(b), a.max(b)))
            .collect();
        e.sort_unstable();
        e.dedup();
        e
    }

    pub fn max_edge_length(&self) -> f64 {
        self.edges().iter().map(|&(a, b)| dist(self.nodes[a], self.nodes[b])).fold(0.0, f64::max)
    }

    /// Sorted list of nodes lying on a boundary edge.
    pub fn boundary_nodes(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.boundary_edges.iter().flat_map(|e| e.nodes).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn is_boundary_node(&self, node: usize) -> bool {
        self.boundary_edges.iter().any(|e| e.nodes.contains(&node))
    }

    /// Boundary nodes in counter-clockwise order, starting at the smallest
    /// boundary node index. Only the loop through that node is returned.
    pub fn boundary_loop(&self) -> Vec<usize> {
        let next: HashMap<usize, usize> = self.boundary_edges.iter().map(|e| (e.nodes[0], e.nodes[1])).collect();
        let start = match self.boundary_nodes().first() {
            Some(&s) => s,
            None => return Vec::new(),
        };
        let mut out = vec![start];
        let mut cur = next[&start];
        while cur != start && out.len() <= self.boundary_edges.len() {
            out.push(cur);
            cur = next[&cur];
        }
        out
    }

    /// Sum of the triangle angles at `node` (the interior angle for
    /// boundary nodes, 2*pi for interior nodes).
    pub fn angle_at(&self, node: usize) -> f64 {
        self.triangles
            .iter()
            .filter_map(|t| {
                let k = t.iter().position(|&v| v == node)?;
                let p = self.nodes[node];
                let a = self.nodes[t[(k + 1) % 3]];
                let b = self.nodes[t[(k + 2) % 3]];
                let (ua, ub) = ([a[0] - p[0], a[1] - p[1]], [b[0] - p[0], b[1] - p[1]]);
                Some((ua[0] * ub[1] - ua[1] * ub[0]).atan2(ua[0] * ub[0] + ua[1] * ub[1]))
            })
            .sum()
    }

    /// A boundary node whose interior angle differs from pi by more than 30 degrees.
    pub fn is_corner(&self, node: usize) -> bool {
        self.is_boundary_node(node) && (self.angle_at(node) - std::f64::consts::PI).abs() > std::f64::consts::PI / 6.0
    }

    /// Triangles having `node` as a vertex, in index order.
    pub fn star(&self, node: usize) -> Vec<usize> {
        (0..self.triangles.len()).filter(|&t| self.triangles[t].contains(&node)).collect()
    }

    /// Euclidean distance from `x` to the nearest boundary edge.
    pub fn distance_to_boundary(&self, x: Point) -> f64 {
        self.boundary_edges
            .iter()
            .map(|e| {
                let (a, b) = (self.nodes[e.nodes[0]], self.nodes[e.nodes[1]]);
                let d = [b[0] - a[0], b[1] - a[1]];
                let len2 = d[0] * d[0] + d[1] * d[1];
                let t = (((x[0] - a[0]) * d[0] + (x[1] - a[1]) * d[1]) / len2).clamp(0.0, 1.0);
                dist(x, [a[0] + t * d[0], a[1] + t * d[1]])
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Copy of the mesh with all coordinates multiplied by `s`.
    pub fn scaled(&self, s: f64) -> Mesh {
        let nodes = self.nodes.iter().map(|p| [s * p[0], s * p[1]]).collect();
        let shape = match self.shape {
            BoundaryShape::Polygonal => BoundaryShape::Polygonal,
            BoundaryShape::Circle { center, radius } => {
                BoundaryShape::Circle { center: [s * center[0], s * center[1]], radius: s * radius }
            }
        };
        Mesh::from_parts_unchecked(nodes, self.triangles.clone(), self.boundary_edges.clone(), shape)
    }

    /// Checks positivity of every triangle, closed boundary loops, the area
    /// sum and the Euler relation V - E + F = 1.
    pub fn check_invariants(&self) -> Result<()> {
        let mut total = 0.0;
        for t in 0..self.triangles.len() {
            let a = self.triangle_area(t);
            if !(a > 0.0) {
                return Err(Error::DegenerateTriangle { index: t, area: a });
            }
            total += a;
        }
        if (total - self.area).abs() > 1e-12 * self.area.abs() {
            return Err(Error::InvalidDomain("triangle areas do not sum to the domain area".into()));
        }
        let mut out_deg: HashMap<usize, i64> = HashMap::new();
        for e in &self.boundary_edges {
            *out_deg.entry(e.nodes[0]).or_default() += 1;
            *out_deg.entry(e.nodes[1]).or_default() -= 1;
        }
        if out_deg.values().any(|&d| d != 0) {
            return Err(Error::InvalidDomain("boundary edges do not form closed loops".into()));
        }
        let euler = self.nodes.len() as i64 - self.edges().len() as i64 + self.triangles.len() as i64;
        if euler != 1 {
            return Err(Error::InvalidDomain(format!("Euler characteristic V - E + F = {euler}, expected 1")));
        }
        Ok(())
    }

    /// Serializes to the `mt-mesh v1` text format.
    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity(64 * self.nodes.len());
        s.push_str("mt-mesh v1\n");
        let _ = writeln!(s, "nodes {}", self.nodes.len());
        for p in &self.nodes {
            let _ = writeln!(s, "{:.16e} {:.16e}", p[0], p[1]);
        }
        let _ = writeln!(s, "tris {}", self.triangles.len());
        for t in &self.triangles {
            let _ = writeln!(s, "{} {} {}", t[0], t[1], t[2]);
        }
        let _ = writeln!(s, "bedges {}", self.boundary_edges.len());
        for e in &self.boundary_edges {
            let _ = writeln!(s, "{} {}", e.nodes[0], e.nodes[1]);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Mesh> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        let mut next = |what: &str| lines.next().ok_or_else(|| Error::Parse(format!("unexpected end of file, expected {what}")));
        if next("header")? != "mt-mesh v1" {
            return Err(Error::Parse("missing `mt-mesh v1` header".into()));
        }
        fn count(line: &str, key: &str) -> Result<usize> {
            let rest = line
                .strip_prefix(key)
                .ok_or_else(|| Error::Parse(format!("expected `{key} <count>`, found `{line}`")))?;
            rest.trim().parse().map_err(|_| Error::Parse(format!("bad count in `{line}`")))
        }
        fn fields<T: std::str::FromStr>(line: &str, n: usize) -> Result<Vec<T>> {
            let v: Vec<T> = line
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| Error::Parse(format!("bad value `{t}`"))))
                .collect::<Result<_>>()?;
            if v.len() != n {
                return Err(Error::Parse(format!("expected {n} values in `{line}`")));
            }
            Ok(v)
        }
        let nn = count(next("nodes")?, "nodes")?;
        let mut nodes = Vec::with_capacity(nn);
        for _ in 0..nn {
            let v: Vec<f64> = fields(next("node")?, 2)?;
            nodes.push([v[0], v[1]]);
        }
        let nt = count(next("tris")?, "tris")?;
        let mut tris = Vec::with_capacity(nt);
        for _ in 0..nt {
            let v: Vec<usize> = fields(next("triangle")?, 3)?;
            tris.push([v[0], v[1], v[2]]);
        }
        let nb = count(next("bedges")?, "bedges")?;
        let mut bedges = Vec::with_capacity(nb);
        for _ in 0..nb {
            let v: Vec<usize> = fields(next("boundary edge")?, 2)?;
            bedges.push([v[0], v[1]]);
        }
        Mesh::from_parts(nodes, tris, bedges)
    }

    /// SHA-256 of the text serialization, hex encoded.
    pub fn content_hash(&self) -> String {
        sha256_hex(self.to_text().as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn square_area_is_exact() {
        let m = build_mesh(&DomainSpec::unit_square(0.5)).unwrap();
        assert_eq!(m.area(), 1.0);
        assert!(m.max_edge_length() <= 0.75);
    }

    #[test]
    fn disk_area_matches_inscribed_polygon() {
        let m = build_mesh(&DomainSpec::disk(1.0, 0.05)).unwrap();
        let nb = m.boundary_edges().len() as f64;
        let inscribed = nb * (2.0 * PI / nb).sin() / 2.0;
        assert!((m.area() - inscribed).abs() < 1e-12);
        assert!((PI - m.area()).abs() <= 0.01);
        assert!(m.max_edge_length() <= 1.5 * 0.05);
    }

    #[test]
    fn refinement_quadruples_triangles() {
        let m = build_mesh(&DomainSpec::unit_square(0.25)).unwrap();
        let r = refine(&m);
        assert_eq!(r.num_triangles(), 4 * m.num_triangles());
        assert_eq!(r.num_nodes(), m.num_nodes() + m.edges().len());
        assert!((r.area() - 1.0).abs() < 1e-14);
        assert!((r.max_edge_length() - 0.5 * m.max_edge_length()).abs() < 1e-14);
        r.check_invariants().unwrap();
    }

    #[test]
    fn refined_disk_area_increases_toward_pi() {
        let mut m = build_mesh(&DomainSpec::disk(1.0, 0.25)).unwrap();
        let mut prev = m.area();
        for _ in 0..3 {
            let h = m.max_edge_length();
            m = refine(&m);
            m.check_invariants().unwrap();
            assert!(m.area() > prev && m.area() < PI);
            assert!(m.max_edge_length() <= 0.6 * h);
            prev = m.area();
        }
    }

    #[test]
    fn boundary_point_selection() {
        let sq = build_mesh(&DomainSpec::unit_square(0.25)).unwrap();
        let p = pick_boundary_point(&sq, [1.0, 0.5]);
        assert_eq!(p.coords, [1.0, 0.5]);
        let inside = pick_boundary_point(&sq, [0.4, 0.45]);
        assert!(sq.is_boundary_node(inside.node_id));
        let disk = build_mesh(&DomainSpec::disk(1.0, 0.1)).unwrap();
        let q = pick_boundary_point(&disk, [2.0, 0.0]);
        assert!((q.coords[0] - 1.0).abs() < 1e-15 && q.coords[1].abs() < 1e-15);
    }

    #[test]
    fn corners_are_detected() {
        let sq = build_mesh(&DomainSpec::unit_square(0.25)).unwrap();
        assert!(sq.is_corner(0));
        let mid = pick_boundary_point(&sq, [0.5, 0.0]);
        assert!(!sq.is_corner(mid.node_id));
        assert!((sq.angle_at(mid.node_id) - PI).abs() < 1e-14);
    }

    #[test]
    fn bad_polygons_are_rejected() {
        let bowtie = vec![[0.0, 0.0], [1.0, 1.0], [1.0, 0.0], [0.0, 1.0]];
        assert!(build_mesh(&DomainSpec::polygon(bowtie, 0.2)).is_err());
        let flat = vec![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]];
        assert!(build_mesh(&DomainSpec::polygon(flat, 0.2)).is_err());
        let cw = vec![[0.0, 0.0], [0.0, 1.0], [1.0, 0.0]];
        assert!(build_mesh(&DomainSpec::polygon(cw, 0.2)).is_err());
    }

    #[test]
    fn l_shaped_polygon_meshes() {
        let l = vec![[0.0, 0.0], [2.0, 0.0], [2.0, 1.0], [1.0, 1.0], [1.0, 2.0], [0.0, 2.0]];
        let m = build_mesh(&DomainSpec::polygon(l, 0.2)).unwrap();
        assert!((m.area() - 3.0).abs() < 1e-12);
        assert!(m.max_edge_length() <= 0.3);
    }

    #[test]
    fn text_round_trip_is_exact() {
        let m = build_mesh(&DomainSpec::disk(1.0, 0.3)).unwrap();
        let back = Mesh::from_text(&m.to_text()).unwrap();
        assert_eq!(back.nodes(), m.nodes());
        assert_eq!(back.triangles(), m.triangles());
        assert_eq!(back.to_text(), m.to_text());
    }

    #[test]
    fn disk_mesh_has_quarter_turn_symmetry() {
        let m = build_mesh(&DomainSpec::disk(1.0, 0.2)).unwrap();
        let key = |p: Point| ((p[0] * 1e9).round() as i64, (p[1] * 1e9).round() as i64);
        let set: std::collections::HashSet<_> = m.nodes().iter().map(|&p| key(p)).collect();
        for p in m.nodes() {
            assert!(set.contains(&key([-p[1], p[0]])));
        }
    }
}
