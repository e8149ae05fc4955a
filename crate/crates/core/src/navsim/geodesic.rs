//! Exact on-mesh shortest paths.
//!
//! In a polygonal walkable region, shortest paths are polylines that bend
//! only at reflex boundary corners. Each navmesh keeps a visibility graph over
//! those corners with all-pairs distances; a query adds the two endpoints and
//! takes the cheapest chain whose first leg is visible.

use glam::{DVec2, DVec3};

use crate::geom::xz;
use crate::scene::NavMesh;

#[derive(Debug, Clone)]
pub(crate) struct VisibilityGraph {
    nodes: Vec<DVec3>,
    /// Row-major all-pairs shortest distances (symmetric).
    dist: Vec<f64>,
    /// `next[i * n + j]` is the node after `i` on the path to `j`.
    next: Vec<u32>,
}

impl VisibilityGraph {
    fn build(mesh: &NavMesh) -> Self {
        let nodes = mesh.index().corners.clone();
        let n = nodes.len();
        let mut dist = vec![f64::INFINITY; n * n];
        let mut next = vec![u32::MAX; n * n];
        for i in 0..n {
            dist[i * n + i] = 0.0;
            next[i * n + i] = i as u32;
            for j in i + 1..n {
                let (a, b) = (xz(nodes[i]), xz(nodes[j]));
                if mesh.visible(a, b) && mesh.visible(b, a) {
                    let d = (nodes[j] - nodes[i]).length();
                    dist[i * n + j] = d;
                    dist[j * n + i] = d;
                    next[i * n + j] = j as u32;
                    next[j * n + i] = i as u32;
                }
            }
        }
        for k in 0..n {
            for i in 0..n {
                let dik = dist[i * n + k];
                if !dik.is_finite() {
                    continue;
                }
                for j in 0..n {
                    let cand = dik + dist[k * n + j];
                    if cand < dist[i * n + j] {
                        dist[i * n + j] = cand;
                        next[i * n + j] = next[i * n + k];
                    }
                }
            }
        }
        for i in 0..n {
            for j in i + 1..n {
                let d = dist[i * n + j].min(dist[j * n + i]);
                dist[i * n + j] = d;
                dist[j * n + i] = d;
            }
        }
        Self { nodes, dist, next }
    }
}

fn graph(mesh: &NavMesh) -> &VisibilityGraph {
    mesh.geodesic.get_or_init(|| VisibilityGraph::build(mesh))
}

/// Geodesic distances from every corner node to a fixed target point.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceField {
    target: DVec3,
    node_cost: Vec<f64>,
    /// Last corner before the target on each node's path (`u32::MAX` = direct).
    node_exit: Vec<u32>,
}

impl DistanceField {
    /// Build the field for `target`, which must be on the mesh.
    pub fn new(mesh: &NavMesh, target: DVec3) -> Self {
        let g = graph(mesh);
        let n = g.nodes.len();
        let t2 = xz(target);
        let direct: Vec<f64> = g
            .nodes
            .iter()
            .map(|&p| {
                if mesh.visible(t2, xz(p)) {
                    (p - target).length()
                } else {
                    f64::INFINITY
                }
            })
            .collect();
        let mut node_cost = vec![f64::INFINITY; n];
        let mut node_exit = vec![u32::MAX; n];
        for i in 0..n {
            for (j, &dj) in direct.iter().enumerate() {
                if !dj.is_finite() {
                    continue;
                }
                let c = g.dist[i * n + j] + dj;
                if c < node_cost[i] {
                    node_cost[i] = c;
                    node_exit[i] = j as u32;
                }
            }
        }
        Self {
            target,
            node_cost,
            node_exit,
        }
    }

    pub fn target(&self) -> DVec3 {
        self.target
    }

    /// Cheapest visible first hop from `p`: `None` means the target itself.
    fn first_hop(&self, mesh: &NavMesh, p: DVec3) -> Option<(f64, Option<usize>)> {
        let g = graph(mesh);
        let p2 = xz(p);
        let mut cands: Vec<(f64, Option<usize>)> = Vec::with_capacity(g.nodes.len() + 1);
        cands.push(((self.target - p).length(), None));
        for (i, &c) in self.node_cost.iter().enumerate() {
            if c.is_finite() {
                cands.push(((g.nodes[i] - p).length() + c, Some(i)));
            }
        }
        cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        cands.into_iter().find(|&(_, hop)| {
            let q: DVec2 = match hop {
                None => xz(self.target),
                Some(i) => xz(g.nodes[i]),
            };
            mesh.visible(p2, q)
        })
    }

    /// Geodesic distance from an on-mesh point to the target (`+∞` if
    /// disconnected).
    pub fn distance_from(&self, mesh: &NavMesh, p: DVec3) -> f64 {
        self.first_hop(mesh, p).map_or(f64::INFINITY, |(d, _)| d)
    }

    /// Shortest path polyline from `p` to the target, both endpoints included.
    pub fn path_from(&self, mesh: &NavMesh, p: DVec3) -> Option<Vec<DVec3>> {
        let (_, hop) = self.first_hop(mesh, p)?;
        let g = graph(mesh);
        let n = g.nodes.len();
        let mut path = vec![p];
        if let Some(mut i) = hop {
            let exit = self.node_exit[i] as usize;
            path.push(g.nodes[i]);
            while i != exit {
                i = g.next[i * n + exit] as usize;
                path.push(g.nodes[i]);
            }
        }
        path.push(self.target);
        Some(path)
    }
}

/// Shortest on-mesh distance between two points (snapped onto the mesh).
pub fn geodesic_distance(mesh: &NavMesh, a: DVec3, b: DVec3) -> f64 {
    let (a, _) = mesh.closest_point(a);
    let (b, _) = mesh.closest_point(b);
    if a == b {
        return 0.0;
    }
    DistanceField::new(mesh, b).distance_from(mesh, a)
}

/// Shortest on-mesh path between two points (snapped onto the mesh).
pub fn shortest_path(mesh: &NavMesh, a: DVec3, b: DVec3) -> Option<Vec<DVec3>> {
    let (a, _) = mesh.closest_point(a);
    let (b, _) = mesh.closest_point(b);
    DistanceField::new(mesh, b).path_from(mesh, a)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// L-shaped region: [0,3]x[0,1] ∪ [0,1]x[0,3]
    fn l_shape() -> NavMesh {
        let v = [
            (0.0, 0.0),
            (1.0, 0.0),
            (3.0, 0.0),
            (3.0, 1.0),
            (1.0, 1.0),
            (0.0, 1.0),
            (1.0, 3.0),
            (0.0, 3.0),
        ]
        .map(|(x, z)| DVec3::new(x, 0.0, z))
        .to_vec();
        let t = vec![[0, 1, 4], [0, 4, 5], [1, 2, 3], [1, 3, 4], [5, 4, 6], [5, 6, 7]];
        NavMesh::new(v, t).unwrap()
    }

    #[test]
    fn l_corridor_bends_at_inner_corner() {
        let m = l_shape();
        let a = DVec3::new(2.5, 0.0, 0.5);
        let b = DVec3::new(0.5, 0.0, 2.5);
        let corner = DVec3::new(1.0, 0.0, 1.0);
        let expect = (corner - a).length() + (b - corner).length();
        let d = geodesic_distance(&m, a, b);
        assert!((d - expect).abs() < 1e-12, "{d} vs {expect}");
        let path = shortest_path(&m, a, b).unwrap();
        assert_eq!(path, vec![a, corner, b]);
    }

    #[test]
    fn convex_region_is_euclidean() {
        let m = l_shape();
        let a = DVec3::new(0.2, 0.0, 0.5);
        let b = DVec3::new(2.9, 0.0, 0.5);
        assert!((geodesic_distance(&m, a, b) - 2.7).abs() < 1e-12);
        assert_eq!(geodesic_distance(&m, a, a), 0.0);
    }
}
