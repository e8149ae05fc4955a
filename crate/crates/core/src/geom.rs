//! Small planar/3D geometry helpers shared by the navigation mesh, the
//! simulator and the renderer.
//!
//! The world is y-up. Navigation happens in the XZ plane; 2D helpers take
//! `DVec2` values whose `y` component holds the world `z` coordinate.

use glam::{DVec2, DVec3};

/// Project a world point onto the navigation plane.
#[inline]
pub fn xz(v: DVec3) -> DVec2 {
    DVec2::new(v.x, v.z)
}

/// 2D cross product (z component of the 3D cross product).
#[inline]
pub fn cross2(a: DVec2, b: DVec2) -> f64 {
    a.x * b.y - a.y * b.x
}

/// Twice the signed area of the planar triangle `abc`.
#[inline]
pub fn orient2(a: DVec2, b: DVec2, c: DVec2) -> f64 {
    cross2(b - a, c - a)
}

/// Unit forward direction for a heading in radians.
///
/// Heading 0 looks down -z; positive headings turn left (counter-clockwise
/// seen from above, i.e. a right-handed rotation about +y).
#[inline]
pub fn heading_dir(heading: f64) -> DVec3 {
    DVec3::new(-heading.sin(), 0.0, -heading.cos())
}

/// Unit right direction for a heading in radians.
#[inline]
pub fn heading_right(heading: f64) -> DVec3 {
    DVec3::new(heading.cos(), 0.0, -heading.sin())
}

/// Wrap an angle into `[0, 2π)`.
#[inline]
pub fn wrap_angle(a: f64) -> f64 {
    a.rem_euclid(std::f64::consts::TAU)
}

/// Wrap an angle into `(-π, π]`.
#[inline]
pub fn wrap_signed(a: f64) -> f64 {
    let w = wrap_angle(a);
    if w > std::f64::consts::PI {
        w - std::f64::consts::TAU
    } else {
        w
    }
}

/// Point-in-triangle test in the XZ plane for a positively oriented triangle,
/// allowing points up to `eps` (in meters, roughly) outside each edge.
pub fn point_in_triangle_xz(p: DVec2, a: DVec2, b: DVec2, c: DVec2, eps: f64) -> bool {
    let edge_ok = |u: DVec2, v: DVec2| {
        let e = v - u;
        let len = e.length();
        if len == 0.0 {
            return true;
        }
        cross2(e, p - u) / len >= -eps
    };
    edge_ok(a, b) && edge_ok(b, c) && edge_ok(c, a)
}

/// Closest point to `p` on the (3D) triangle `abc`.
///
/// Region-based evaluation after Ericson, "Real-Time Collision Detection".
pub fn closest_point_on_triangle(p: DVec3, a: DVec3, b: DVec3, c: DVec3) -> DVec3 {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(ap);
    let d2 = ac.dot(ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return a;
    }
    let bp = p - b;
    let d3 = ab.dot(bp);
    let d4 = ac.dot(bp);
    if d3 >= 0.0 && d4 <= d3 {
        return b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return a + ab * v;
    }
    let cp = p - c;
    let d5 = ab.dot(cp);
    let d6 = ac.dot(cp);
    if d6 >= 0.0 && d5 <= d6 {
        return c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return a + ac * w;
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return b + (c - b) * w;
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    a + ab * v + ac * w
}

/// Axis-aligned bounding box in meters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Aabb {
    pub min: DVec3,
    pub max: DVec3,
}

impl Aabb {
    pub fn empty() -> Self {
        Self {
            min: DVec3::splat(f64::INFINITY),
            max: DVec3::splat(f64::NEG_INFINITY),
        }
    }

    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a DVec3>) -> Self {
        let mut b = Self::empty();
        for p in points {
            b.min = b.min.min(*p);
            b.max = b.max.max(*p);
        }
        b
    }

    pub fn contains(&self, p: DVec3, eps: f64) -> bool {
        p.cmpge(self.min - DVec3::splat(eps)).all() && p.cmple(self.max + DVec3::splat(eps)).all()
    }
}
