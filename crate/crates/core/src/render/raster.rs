//! Scanline-free half-space rasterizer with 8-bit subpixel precision.

use glam::DVec3;

use super::{CameraView, PreparedMesh};

const SUBPIXEL_BITS: u32 = 8;
const SUBPIXEL: f64 = (1 << SUBPIXEL_BITS) as f64;
const HALF: i64 = 1 << (SUBPIXEL_BITS - 1);
/// Guard band, in viewport half-widths, applied before snapping.
const GUARD: f64 = 64.0;

/// Render target. The z-buffer holds inverse depth; a fragment wins when its
/// 1/z is strictly greater than the stored value.
pub(super) struct Target {
    pub width: usize,
    pub height: usize,
    inv_depth: Vec<f32>,
    pub depth: Vec<f32>,
    pub color: Option<Vec<[f32; 3]>>,
}

impl Target {
    pub fn new(width: usize, height: usize, far: f32, color: bool) -> Self {
        Self {
            width,
            height,
            inv_depth: vec![1.0 / far; width * height],
            depth: Vec::new(),
            color: color.then(|| vec![[0.0; 3]; width * height]),
        }
    }

    /// Convert the z-buffer to eye-space depth clamped to `[near, far]`.
    pub fn resolve(&mut self, near: f32, far: f32) {
        let clear = 1.0 / far;
        self.depth.resize(self.inv_depth.len(), 0.0);
        for (d, &iz) in self.depth.iter_mut().zip(&self.inv_depth) {
            let z = 1.0 / iz;
            let z = if z < near { near } else { z };
            *d = if iz > clear && z < far { z } else { far };
        }
    }
}

#[derive(Clone, Copy)]
struct ClipVert {
    p: DVec3,
    c: [f64; 3],
}

fn lerp(a: ClipVert, b: ClipVert, t: f64) -> ClipVert {
    ClipVert {
        p: a.p + (b.p - a.p) * t,
        c: [
            a.c[0] + (b.c[0] - a.c[0]) * t,
            a.c[1] + (b.c[1] - a.c[1]) * t,
            a.c[2] + (b.c[2] - a.c[2]) * t,
        ],
    }
}

/// Keep the part of `poly` where `dist >= 0`.
fn clip(poly: &[ClipVert], out: &mut Vec<ClipVert>, dist: impl Fn(DVec3) -> f64) {
    out.clear();
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        let (da, db) = (dist(a.p), dist(b.p));
        if da >= 0.0 {
            out.push(a);
        }
        if (da >= 0.0) != (db >= 0.0) {
            out.push(lerp(a, b, da / (da - db)));
        }
    }
}

#[derive(Clone, Copy)]
struct ScreenVert {
    x: i64,
    y: i64,
    /// Unsnapped position in pixels.
    fx: f64,
    fy: f64,
    inv_z: f64,
    c_over_z: [f64; 3],
}

/// Smallest `k` with `k * d >= n`, for `d > 0`.
#[inline]
fn ceil_div(n: i64, d: i64) -> i64 {
    let mut k = (n as f64 / d as f64) as i64;
    while k * d < n {
        k += 1;
    }
    while (k - 1) * d >= n {
        k -= 1;
    }
    k
}

/// Largest `k` with `k * d <= n`, for `d > 0`.
#[inline]
fn floor_div(n: i64, d: i64) -> i64 {
    let mut k = (n as f64 / d as f64) as i64;
    while k * d > n {
        k -= 1;
    }
    while (k + 1) * d <= n {
        k += 1;
    }
    k
}

/// Round half away from zero.
#[inline]
fn round_i64(v: f64) -> i64 {
    let t = v as i64;
    let f = v - t as f64;
    if f >= 0.5 {
        t + 1
    } else if f <= -0.5 {
        t - 1
    } else {
        t
    }
}

#[inline]
fn edge(a: &ScreenVert, b: &ScreenVert, px: i64, py: i64) -> i64 {
    (b.x - a.x) * (py - a.y) - (b.y - a.y) * (px - a.x)
}

/// Top or left edge for a triangle that is clockwise on a y-down screen.
#[inline]
fn is_top_left(a: &ScreenVert, b: &ScreenVert) -> bool {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    (dy == 0 && dx > 0) || dy < 0
}

/// Draw the listed triangles (indices into `mesh`) with eye-space vertices `eye`.
pub(super) fn draw(
    t: &mut Target,
    mesh: &PreparedMesh,
    eye: &[DVec3],
    tris: &[u32],
    view: &CameraView,
    backface_culling: bool,
) {
    let tan_y = (view.fov_degrees.to_radians() / 2.0).tan();
    let focal = t.height as f64 / 2.0 / tan_y;
    let tan_x = t.width as f64 / 2.0 / focal;
    let (gx, gy) = (tan_x * GUARD, tan_y * GUARD);
    let near = view.near;
    let (cx, cy) = (t.width as f64 / 2.0, t.height as f64 / 2.0);
    let mut poly = Vec::with_capacity(8);
    let mut tmp = Vec::with_capacity(8);
    let mut sv = Vec::with_capacity(8);
    for &ti in tris {
        let idx = mesh.triangles[ti as usize];
        if backface_culling && mesh.normals[ti as usize].dot(view.position - mesh.positions[idx[0] as usize]) <= 0.0 {
            continue;
        }
        poly.clear();
        for &v in &idx {
            let c = mesh.colors[v as usize];
            poly.push(ClipVert {
                p: eye[v as usize],
                c: [c[0] as f64, c[1] as f64, c[2] as f64],
            });
        }
        if poly
            .iter()
            .all(|v| v.p.z >= near && v.p.x.abs() <= gx * v.p.z && v.p.y.abs() <= gy * v.p.z)
        {
            // fully inside near plane and guard band
        } else {
            clip(&poly, &mut tmp, |p| p.z - near);
            clip(&tmp, &mut poly, |p| gx * p.z - p.x);
            clip(&poly, &mut tmp, |p| gx * p.z + p.x);
            clip(&tmp, &mut poly, |p| gy * p.z - p.y);
            clip(&poly, &mut tmp, |p| gy * p.z + p.y);
            std::mem::swap(&mut poly, &mut tmp);
            if poly.len() < 3 {
                continue;
            }
        }
        sv.clear();
        sv.extend(poly.iter().map(|v| {
            let z = v.p.z.max(near);
            let sx = cx + focal * v.p.x / z;
            let sy = cy - focal * v.p.y / z;
            let inv_z = 1.0 / z;
            ScreenVert {
                x: round_i64(sx * SUBPIXEL),
                y: round_i64(sy * SUBPIXEL),
                fx: sx,
                fy: sy,
                inv_z,
                c_over_z: [v.c[0] * inv_z, v.c[1] * inv_z, v.c[2] * inv_z],
            }
        }));
        for k in 1..sv.len() - 1 {
            fill(t, sv[0], sv[k], sv[k + 1]);
        }
    }
}

fn fill(t: &mut Target, a: ScreenVert, mut b: ScreenVert, mut c: ScreenVert) {
    let area = edge(&a, &b, c.x, c.y);
    if area == 0 {
        return;
    }
    if area < 0 {
        std::mem::swap(&mut b, &mut c);
    }
    let min_x = a.x.min(b.x).min(c.x);
    let max_x = a.x.max(b.x).max(c.x);
    let min_y = a.y.min(b.y).min(c.y);
    let max_y = a.y.max(b.y).max(c.y);
    let step = 1i64 << SUBPIXEL_BITS;
    // pixel centers sit at (i + 1/2) in subpixel units
    let x0 = ceil_div(min_x - HALF, step).max(0);
    let x1 = floor_div(max_x - HALF, step).min(t.width as i64 - 1);
    let y0 = ceil_div(min_y - HALF, step).max(0);
    let y1 = floor_div(max_y - HALF, step).min(t.height as i64 - 1);
    if x0 > x1 || y0 > y1 {
        return;
    }
    let bias0 = if is_top_left(&b, &c) { 0 } else { -1 };
    let bias1 = if is_top_left(&c, &a) { 0 } else { -1 };
    let bias2 = if is_top_left(&a, &b) { 0 } else { -1 };
    let (px0, py0) = (x0 * step + HALF, y0 * step + HALF);
    // edge increments per pixel step in x and y
    let (e0dx, e0dy) = (-(c.y - b.y) * step, (c.x - b.x) * step);
    let (e1dx, e1dy) = (-(a.y - c.y) * step, (a.x - c.x) * step);
    let (e2dx, e2dy) = (-(b.y - a.y) * step, (b.x - a.x) * step);
    let r0 = edge(&b, &c, px0, py0);
    let r1 = edge(&c, &a, px0, py0);
    let r2 = edge(&a, &b, px0, py0);
    // coverage uses the snapped vertices; 1/z and c/z come from the exact
    // screen positions so snapping does not tilt the depth plane
    let geom = AttributeGeometry::new(&a, &b, &c);
    let iz_plane = geom.plane(a.inv_z, b.inv_z, c.inv_z);
    let cz_planes: [Plane; 3] = std::array::from_fn(|ch| geom.plane(a.c_over_z[ch], b.c_over_z[ch], c.c_over_z[ch]));
    let iz_dx = iz_plane.dx;
    let cz_dx: [f64; 3] = std::array::from_fn(|ch| cz_planes[ch].dx);
    let width = t.width;
    let mut spans = [
        EdgeSpan::new(r0 + bias0, e0dx, e0dy),
        EdgeSpan::new(r1 + bias1, e1dx, e1dy),
        EdgeSpan::new(r2 + bias2, e2dx, e2dy),
    ];
    for y in y0..=y1 {
        // covered span of this row: every edge function (plus bias) >= 0
        let mut lo = x0;
        let mut hi = x1;
        for e in &mut spans {
            match e.kind {
                SpanKind::Lower => lo = lo.max(x0 + e.k),
                SpanKind::Upper => hi = hi.min(x0 + e.k),
                SpanKind::Flat => {
                    if e.v < 0 {
                        hi = lo - 1;
                    }
                }
            }
            e.next_row();
        }
        if lo <= hi {
            let (cx, cy) = (lo as f64 + 0.5, y as f64 + 0.5);
            let mut iz = iz_plane.at(cx, cy);
            let row = y as usize * width;
            let zbuf = &mut t.inv_depth[row + lo as usize..=row + hi as usize];
            match t.color.as_mut() {
                None => {
                    for d in zbuf.iter_mut() {
                        let z = iz as f32;
                        if z > *d {
                            *d = z;
                        }
                        iz += iz_dx;
                    }
                }
                Some(color) => {
                    let mut cz: [f64; 3] = std::array::from_fn(|ch| cz_planes[ch].at(cx, cy));
                    let color = &mut color[row + lo as usize..=row + hi as usize];
                    for (d, col) in zbuf.iter_mut().zip(color.iter_mut()) {
                        let z = iz as f32;
                        if z > *d {
                            *d = z;
                            *col = [(cz[0] / iz) as f32, (cz[1] / iz) as f32, (cz[2] / iz) as f32];
                        }
                        iz += iz_dx;
                        for ch in 0..3 {
                            cz[ch] += cz_dx[ch];
                        }
                    }
                }
            }
        }
    }
}

/// Affine attribute `f(x, y) = f0 + dx·(x − x0) + dy·(y − y0)` in pixels.
#[derive(Clone, Copy)]
struct Plane {
    x0: f64,
    y0: f64,
    f0: f64,
    dx: f64,
    dy: f64,
}

impl Plane {
    #[inline]
    fn at(&self, x: f64, y: f64) -> f64 {
        self.f0 + self.dx * (x - self.x0) + self.dy * (y - self.y0)
    }
}

/// Screen-space triangle used to fit attribute planes.
struct AttributeGeometry {
    p: [(f64, f64); 3],
    inv_det: f64,
}

impl AttributeGeometry {
    fn new(a: &ScreenVert, b: &ScreenVert, c: &ScreenVert) -> Self {
        let det = |p: &[(f64, f64); 3]| (p[1].0 - p[0].0) * (p[2].1 - p[0].1) - (p[2].0 - p[0].0) * (p[1].1 - p[0].1);
        let exact = [(a.fx, a.fy), (b.fx, b.fy), (c.fx, c.fy)];
        let d = det(&exact);
        if d.abs() > 1e-9 {
            return Self {
                p: exact,
                inv_det: 1.0 / d,
            };
        }
        // exact positions degenerate where the snapped ones are not
        let snapped = [a, b, c].map(|v| (v.x as f64 / SUBPIXEL, v.y as f64 / SUBPIXEL));
        Self {
            inv_det: 1.0 / det(&snapped),
            p: snapped,
        }
    }

    fn plane(&self, fa: f64, fb: f64, fc: f64) -> Plane {
        let [(xa, ya), (xb, yb), (xc, yc)] = self.p;
        let (db, dc) = (fb - fa, fc - fa);
        Plane {
            x0: xa,
            y0: ya,
            f0: fa,
            dx: (db * (yc - ya) - dc * (yb - ya)) * self.inv_det,
            dy: (dc * (xb - xa) - db * (xc - xa)) * self.inv_det,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum SpanKind {
    /// Edge bounds the span from the left.
    Lower,
    /// Edge bounds the span from the right.
    Upper,
    /// Edge function constant along the row.
    Flat,
}

/// Exact per-row bound `k` on pixel offsets where `v + k * dx >= 0`, advanced
/// from row to row with integer steps only.
struct EdgeSpan {
    kind: SpanKind,
    /// Edge value (plus bias) at offset 0 of the current row (only `Flat`).
    v: i64,
    k: i64,
    /// `v + k * dx` for `Lower`, `v - k * |dx|` for `Upper`; in `[0, |dx|)`.
    s: i64,
    d: i64,
    q: i64,
    r: i64,
    dy: i64,
}

impl EdgeSpan {
    fn new(v: i64, dx: i64, dy: i64) -> Self {
        let d = dx.abs();
        let (kind, k, s) = match dx.signum() {
            1 => {
                let k = ceil_div(-v, d);
                (SpanKind::Lower, k, v + k * d)
            }
            -1 => {
                let k = floor_div(v, d);
                (SpanKind::Upper, k, v - k * d)
            }
            _ => (SpanKind::Flat, 0, 0),
        };
        let (q, r) = if d > 0 {
            (dy.div_euclid(d), dy.rem_euclid(d))
        } else {
            (0, 0)
        };
        Self {
            kind,
            v,
            k,
            s,
            d,
            q,
            r,
            dy,
        }
    }

    #[inline]
    fn next_row(&mut self) {
        match self.kind {
            SpanKind::Lower => {
                self.k -= self.q;
                self.s += self.r;
                if self.s >= self.d {
                    self.k -= 1;
                    self.s -= self.d;
                }
            }
            SpanKind::Upper => {
                self.k += self.q;
                self.s += self.r;
                if self.s >= self.d {
                    self.k += 1;
                    self.s -= self.d;
                }
            }
            SpanKind::Flat => self.v += self.dy,
        }
    }
}

/// 2×2 box filter from a double-resolution target.
pub(super) fn downsample2(t: &Target, w: usize, h: usize) -> (Vec<f32>, Option<Vec<[f32; 3]>>) {
    let mut depth = vec![0f32; w * h];
    let mut color = t.color.as_ref().map(|_| vec![[0f32; 3]; w * h]);
    for y in 0..h {
        for x in 0..w {
            let s = [
                2 * y * t.width + 2 * x,
                2 * y * t.width + 2 * x + 1,
                (2 * y + 1) * t.width + 2 * x,
                (2 * y + 1) * t.width + 2 * x + 1,
            ];
            depth[y * w + x] = s.iter().map(|&i| t.depth[i]).sum::<f32>() * 0.25;
            if let (Some(out), Some(src)) = (color.as_mut(), t.color.as_ref()) {
                let mut acc = [0f32; 3];
                for &i in &s {
                    for ch in 0..3 {
                        acc[ch] += src[i][ch];
                    }
                }
                out[y * w + x] = acc.map(|v| v * 0.25);
            }
        }
    }
    (depth, color)
}
