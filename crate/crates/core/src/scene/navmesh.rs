//! Triangle navigation mesh with a uniform-grid point locator and a merged
//! boundary polyline used for collision and visibility queries.

use std::collections::HashMap;
use std::sync::OnceLock;

use glam::{DVec2, DVec3};

use super::SceneError;
use crate::geom::{closest_point_on_triangle, cross2, orient2, point_in_triangle_xz, xz, Aabb};

/// Minimum triangle area accepted by [`NavMesh::new`], in square meters.
pub const MIN_TRIANGLE_AREA: f64 = 1e-9;

/// Tolerance used when deciding whether a planar point lies on the mesh.
pub const ON_MESH_EPS: f64 = 1e-9;

/// Walkable surface: triangles with edge adjacency.
///
/// Edge `e` of triangle `t` runs from `triangles[t][e]` to
/// `triangles[t][(e + 1) % 3]`; `adjacency[t][e]` is the neighbor across that
/// edge or `-1` on the boundary. Triangles are stored with positive
/// orientation in the XZ plane.
#[derive(Debug, Clone)]
pub struct NavMesh {
    vertices: Vec<DVec3>,
    triangles: Vec<[u32; 3]>,
    adjacency: Vec<[i32; 3]>,
    index: OnceLock<NavIndex>,
    pub(crate) geodesic: OnceLock<crate::navsim::geodesic::VisibilityGraph>,
}

impl PartialEq for NavMesh {
    fn eq(&self, other: &Self) -> bool {
        self.vertices == other.vertices && self.triangles == other.triangles && self.adjacency == other.adjacency
    }
}

/// A maximal straight run of boundary edges, oriented so that the walkable
/// side is on the left (`cross2(end - start, p - start) > 0` for interior p).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundarySegment {
    pub start: DVec2,
    pub end: DVec2,
}

#[derive(Debug, Clone)]
pub(crate) struct NavIndex {
    origin: DVec2,
    cell: f64,
    dims: (usize, usize),
    buckets: Vec<Vec<u32>>,
    pub(crate) boundary: Vec<BoundarySegment>,
    /// Boundary vertices where the walkable region is reflex (or pinched);
    /// shortest paths bend only at these points.
    pub(crate) corners: Vec<DVec3>,
    area_cdf: Vec<f64>,
}

impl NavMesh {
    /// Build a navmesh, computing adjacency from shared edges.
    ///
    /// Negatively oriented triangles are flipped in place.
    pub fn new(vertices: Vec<DVec3>, mut triangles: Vec<[u32; 3]>) -> Result<Self, SceneError> {
        if triangles.is_empty() {
            return Err(SceneError::InvalidMesh("navmesh has no triangles".into()));
        }
        for (t, tri) in triangles.iter_mut().enumerate() {
            if tri.iter().any(|&i| i as usize >= vertices.len()) {
                return Err(SceneError::InvalidMesh(format!(
                    "navmesh triangle {t} index out of range"
                )));
            }
            let [a, b, c] = tri.map(|i| xz(vertices[i as usize]));
            let o = orient2(a, b, c);
            if o.abs() * 0.5 <= MIN_TRIANGLE_AREA {
                return Err(SceneError::InvalidMesh(format!("navmesh triangle {t} is degenerate")));
            }
            if o < 0.0 {
                tri.swap(1, 2);
            }
        }
        let adjacency = compute_adjacency(&triangles)?;
        Ok(Self {
            vertices,
            triangles,
            adjacency,
            index: OnceLock::new(),
            geodesic: OnceLock::new(),
        })
    }

    /// Rebuild a navmesh from stored parts, checking that the stored adjacency
    /// matches the geometry.
    pub fn from_parts(
        vertices: Vec<DVec3>,
        triangles: Vec<[u32; 3]>,
        adjacency: Vec<[i32; 3]>,
    ) -> Result<Self, SceneError> {
        let mesh = Self::new(vertices, triangles.clone())?;
        if mesh.triangles != triangles {
            return Err(SceneError::InvalidMesh(
                "stored navmesh triangles are not positively oriented".into(),
            ));
        }
        if mesh.adjacency != adjacency {
            return Err(SceneError::InvalidMesh(
                "stored navmesh adjacency does not match triangles".into(),
            ));
        }
        Ok(mesh)
    }

    pub fn vertices(&self) -> &[DVec3] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[u32; 3]] {
        &self.triangles
    }

    pub fn adjacency(&self) -> &[[i32; 3]] {
        &self.adjacency
    }

    pub fn triangle_count(&self) -> usize {
        self.triangles.len()
    }

    pub fn triangle_points(&self, t: usize) -> [DVec3; 3] {
        self.triangles[t].map(|i| self.vertices[i as usize])
    }

    /// Planar area of triangle `t`.
    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangle_points(t).map(xz);
        orient2(a, b, c) * 0.5
    }

    /// Total planar area in square meters.
    pub fn area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    pub fn bounds(&self) -> Aabb {
        Aabb::from_points(&self.vertices)
    }

    pub(crate) fn index(&self) -> &NavIndex {
        self.index.get_or_init(|| NavIndex::build(self))
    }

    /// Merged boundary segments of the walkable region.
    pub fn boundary(&self) -> &[BoundarySegment] {
        &self.index().boundary
    }

    /// First triangle containing the planar point, if any.
    pub fn locate(&self, p: DVec2) -> Option<usize> {
        let idx = self.index();
        let (cx, cz) = idx.cell_of(p)?;
        idx.buckets[cz * idx.dims.0 + cx]
            .iter()
            .map(|&t| t as usize)
            .find(|&t| {
                let [a, b, c] = self.triangle_points(t).map(xz);
                point_in_triangle_xz(p, a, b, c, ON_MESH_EPS)
            })
    }

    /// Whether the planar point lies on the walkable surface.
    pub fn contains(&self, p: DVec2) -> bool {
        self.locate(p).is_some()
    }

    /// Surface height at a planar point inside triangle `t`.
    pub fn height_in(&self, t: usize, p: DVec2) -> f64 {
        let [a, b, c] = self.triangle_points(t);
        let (a2, b2, c2) = (xz(a), xz(b), xz(c));
        let area = orient2(a2, b2, c2);
        let wa = orient2(p, b2, c2) / area;
        let wb = orient2(a2, p, c2) / area;
        let wc = 1.0 - wa - wb;
        wa * a.y + wb * b.y + wc * c.y
    }

    /// Lift a planar point onto the surface, if it is on the mesh.
    pub fn lift(&self, p: DVec2) -> Option<DVec3> {
        self.locate(p).map(|t| DVec3::new(p.x, self.height_in(t, p), p.y))
    }

    /// Closest point on any triangle to `p`, with the triangle it lies on.
    pub fn closest_point(&self, p: DVec3) -> (DVec3, usize) {
        let idx = self.index();
        let (cx0, cz0) = idx.clamped_cell(xz(p));
        let (nx, nz) = idx.dims;
        let max_ring = nx.max(nz);
        let mut best: Option<(f64, DVec3, usize)> = None;
        let mut seen = vec![false; self.triangles.len()];
        for ring in 0..=max_ring {
            let r = ring as isize;
            for dz in -r..=r {
                for dx in -r..=r {
                    if dx.abs() != r && dz.abs() != r {
                        continue;
                    }
                    let (x, z) = (cx0 as isize + dx, cz0 as isize + dz);
                    if x < 0 || z < 0 || x >= nx as isize || z >= nz as isize {
                        continue;
                    }
                    for &t in &idx.buckets[z as usize * nx + x as usize] {
                        let t = t as usize;
                        if std::mem::replace(&mut seen[t], true) {
                            continue;
                        }
                        let [a, b, c] = self.triangle_points(t);
                        let q = closest_point_on_triangle(p, a, b, c);
                        let d = (q - p).length_squared();
                        if best.is_none_or(|(bd, _, bt)| d < bd || (d == bd && t < bt)) {
                            best = Some((d, q, t));
                        }
                    }
                }
            }
            if let Some((d, _, _)) = best {
                let reach = ring as f64 * idx.cell;
                if d.sqrt() < reach {
                    break;
                }
            }
        }
        let (_, q, t) = best.expect("navmesh has at least one triangle");
        (q, t)
    }

    /// Distance from `p` to the surface.
    pub fn distance_to(&self, p: DVec3) -> f64 {
        (self.closest_point(p).0 - p).length()
    }

    /// Parameter `t ∈ [0, 1]` at which the planar segment `a → b` first
    /// leaves the walkable region, or `None` if it stays on the mesh.
    ///
    /// `a` is assumed to be on the mesh. Grazing a boundary vertex or running
    /// along a boundary edge does not count as leaving.
    pub fn first_exit(&self, a: DVec2, b: DVec2) -> Option<f64> {
        let d = b - a;
        let dl = d.length();
        if dl == 0.0 {
            return None;
        }
        // (t, outward) crossing events
        let mut events: Vec<(f64, bool)> = Vec::new();
        for seg in &self.index().boundary {
            let e = seg.end - seg.start;
            let denom = cross2(d, e);
            if denom.abs() <= 1e-14 * dl * e.length() {
                continue;
            }
            let w = seg.start - a;
            let t = cross2(w, e) / denom;
            let s = cross2(w, d) / denom;
            let s_tol = 1e-9 / e.length();
            let t_tol = 1e-9 / dl;
            if t < -t_tol || t > 1.0 + t_tol || s < -s_tol || s > 1.0 + s_tol {
                continue;
            }
            events.push((t.clamp(0.0, 1.0), cross2(e, d) < 0.0));
        }
        if events.is_empty() {
            return None;
        }
        events.sort_by(|x, y| x.0.total_cmp(&y.0));
        let gap = 1e-9 / dl;
        for (k, &(t, outward)) in events.iter().enumerate() {
            if !outward {
                continue;
            }
            if t >= 1.0 - gap {
                break;
            }
            let next = events[k + 1..]
                .iter()
                .map(|e| e.0)
                .find(|&u| u > t + gap)
                .unwrap_or(1.0);
            let probe = a + d * (0.5 * (t + next));
            if !self.contains(probe) {
                return Some(t);
            }
        }
        None
    }

    /// Whether the straight segment between two on-mesh points stays on the mesh.
    pub fn visible(&self, a: DVec2, b: DVec2) -> bool {
        self.first_exit(a, b).is_none()
    }

    /// Sample a point uniformly (by area) on the surface from two/three
    /// uniform variates in `[0, 1)`.
    pub fn sample_point(&self, u_tri: f64, u1: f64, u2: f64) -> DVec3 {
        let cdf = &self.index().area_cdf;
        let total = *cdf.last().expect("nonempty");
        let target = u_tri * total;
        let t = cdf.partition_point(|&c| c <= target).min(cdf.len() - 1);
        let [a, b, c] = self.triangle_points(t);
        let (mut r1, mut r2) = (u1, u2);
        if r1 + r2 > 1.0 {
            r1 = 1.0 - r1;
            r2 = 1.0 - r2;
        }
        a + (b - a) * r1 + (c - a) * r2
    }
}

fn compute_adjacency(triangles: &[[u32; 3]]) -> Result<Vec<[i32; 3]>, SceneError> {
    let mut edges: HashMap<(u32, u32), (usize, usize)> = HashMap::with_capacity(triangles.len() * 3);
    for (t, tri) in triangles.iter().enumerate() {
        for e in 0..3 {
            let (u, v) = (tri[e], tri[(e + 1) % 3]);
            if edges.insert((u, v), (t, e)).is_some() {
                return Err(SceneError::InvalidMesh(format!(
                    "navmesh edge ({u},{v}) is not manifold"
                )));
            }
        }
    }
    let mut adjacency = vec![[-1i32; 3]; triangles.len()];
    for (t, tri) in triangles.iter().enumerate() {
        for e in 0..3 {
            let (u, v) = (tri[e], tri[(e + 1) % 3]);
            if let Some(&(n, _)) = edges.get(&(v, u)) {
                adjacency[t][e] = n as i32;
            }
        }
    }
    Ok(adjacency)
}

impl NavIndex {
    fn build(mesh: &NavMesh) -> Self {
        let bounds = mesh.bounds();
        let origin = xz(bounds.min);
        let extent = xz(bounds.max) - origin;
        let mean_area = mesh.area() / mesh.triangle_count() as f64;
        let cell = (mean_area.sqrt() * 2.0).max(extent.max_element() / 256.0).max(1e-3);
        let nx = ((extent.x / cell).floor() as usize + 1).max(1);
        let nz = ((extent.y / cell).floor() as usize + 1).max(1);
        let mut idx = NavIndex {
            origin,
            cell,
            dims: (nx, nz),
            buckets: vec![Vec::new(); nx * nz],
            boundary: Vec::new(),
            corners: Vec::new(),
            area_cdf: Vec::with_capacity(mesh.triangle_count()),
        };
        let mut acc = 0.0;
        for t in 0..mesh.triangle_count() {
            let pts = mesh.triangle_points(t);
            let lo = pts.iter().map(|p| xz(*p)).fold(DVec2::splat(f64::INFINITY), DVec2::min);
            let hi = pts
                .iter()
                .map(|p| xz(*p))
                .fold(DVec2::splat(f64::NEG_INFINITY), DVec2::max);
            let margin = DVec2::splat(ON_MESH_EPS * 2.0);
            let (x0, z0) = idx.clamped_cell(lo - margin);
            let (x1, z1) = idx.clamped_cell(hi + margin);
            for z in z0..=z1 {
                for x in x0..=x1 {
                    idx.buckets[z * nx + x].push(t as u32);
                }
            }
            acc += mesh.triangle_area(t);
            idx.area_cdf.push(acc);
        }
        let (boundary, corners) = merge_boundary(mesh);
        idx.boundary = boundary;
        idx.corners = corners;
        idx
    }

    fn cell_of(&self, p: DVec2) -> Option<(usize, usize)> {
        let eps = ON_MESH_EPS * 2.0;
        let r = (p - self.origin) / self.cell;
        let lim_x = self.dims.0 as f64;
        let lim_z = self.dims.1 as f64;
        let e = eps / self.cell;
        if r.x < -e || r.y < -e || r.x >= lim_x + e || r.y >= lim_z + e {
            return None;
        }
        Some(self.clamped_cell(p))
    }

    fn clamped_cell(&self, p: DVec2) -> (usize, usize) {
        let r = (p - self.origin) / self.cell;
        let x = (r.x.floor().max(0.0) as usize).min(self.dims.0 - 1);
        let z = (r.y.floor().max(0.0) as usize).min(self.dims.1 - 1);
        (x, z)
    }
}

/// Merge collinear consecutive boundary edges and collect path corners.
fn merge_boundary(mesh: &NavMesh) -> (Vec<BoundarySegment>, Vec<DVec3>) {
    let mut edges: Vec<(u32, u32)> = Vec::new();
    for (t, tri) in mesh.triangles.iter().enumerate() {
        for e in 0..3 {
            if mesh.adjacency[t][e] < 0 {
                edges.push((tri[e], tri[(e + 1) % 3]));
            }
        }
    }
    edges.sort_unstable();
    let mut out_of: HashMap<u32, Vec<usize>> = HashMap::new();
    let mut in_of: HashMap<u32, Vec<usize>> = HashMap::new();
    for (i, &(u, v)) in edges.iter().enumerate() {
        out_of.entry(u).or_default().push(i);
        in_of.entry(v).or_default().push(i);
    }
    let p = |i: u32| xz(mesh.vertices[i as usize]);
    let dir = |i: usize| (p(edges[i].1) - p(edges[i].0)).normalize();
    let collinear = |a: usize, b: usize| {
        let (da, db) = (dir(a), dir(b));
        cross2(da, db).abs() < 1e-12 && da.dot(db) > 0.0
    };
    // a vertex is a "joint" when exactly one edge enters and one leaves
    let joint = |v: u32| -> Option<(usize, usize)> {
        match (in_of.get(&v).map(Vec::as_slice), out_of.get(&v).map(Vec::as_slice)) {
            (Some([i]), Some([o])) => Some((*i, *o)),
            _ => None,
        }
    };
    let mut used = vec![false; edges.len()];
    let mut segments = Vec::new();
    for start in 0..edges.len() {
        if used[start] {
            continue;
        }
        // walk backwards to the beginning of the straight run
        let mut first = start;
        loop {
            match joint(edges[first].0) {
                Some((i, _)) if !used[i] && i != start && collinear(i, first) => first = i,
                _ => break,
            }
        }
        let mut last = first;
        used[first] = true;
        loop {
            match joint(edges[last].1) {
                Some((_, o)) if !used[o] && collinear(last, o) => {
                    used[o] = true;
                    last = o;
                }
                _ => break,
            }
        }
        segments.push(BoundarySegment {
            start: p(edges[first].0),
            end: p(edges[last].1),
        });
    }
    segments.sort_by(|a, b| {
        (a.start.x, a.start.y, a.end.x, a.end.y)
            .partial_cmp(&(b.start.x, b.start.y, b.end.x, b.end.y))
            .expect("finite")
    });

    let mut corners = Vec::new();
    let mut vertices: Vec<u32> = out_of.keys().copied().collect();
    vertices.sort_unstable();
    for v in vertices {
        let reflex = match joint(v) {
            Some((i, o)) => cross2(dir(i), dir(o)) < -1e-12,
            None => true,
        };
        if reflex {
            corners.push(mesh.vertices[v as usize]);
        }
    }
    (segments, corners)
}
