//! Procedural maze interiors.
//!
//! A recursive backtracker carves a spanning tree over a grid of cells, then
//! each remaining interior wall is removed with a fixed probability to open
//! loops. Walls are extruded into boxes; the navmesh is the floor eroded by
//! half the wall thickness plus the agent radius, triangulated on the grid of
//! erosion breakpoints so that neighboring rectangles share whole edges.

use glam::DVec3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{NavMesh, SceneAsset, SceneError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSpec {
    pub cells_x: u32,
    pub cells_z: u32,
    /// Cell edge length in meters.
    pub cell_size: f64,
    /// Probability of removing each interior wall left standing by the maze.
    pub wall_removal_probability: f64,
    pub wall_thickness: f64,
    pub wall_height: f64,
    /// Clearance kept between the walkable region and wall faces.
    pub agent_radius: f64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            cells_x: 6,
            cells_z: 6,
            cell_size: 1.5,
            wall_removal_probability: 0.15,
            wall_thickness: 0.1,
            wall_height: 2.5,
            agent_radius: 0.05,
        }
    }
}

impl GeneratorSpec {
    /// Half-width of the blocked band around every wall line.
    pub fn erosion(&self) -> f64 {
        self.wall_thickness * 0.5 + self.agent_radius
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let mut problems = Vec::new();
        if self.cells_x < 2 || self.cells_z < 2 {
            problems.push(format!(
                "grid must be at least 2x2 cells, got {}x{}",
                self.cells_x, self.cells_z
            ));
        }
        if !(self.cell_size > 0.0 && self.cell_size.is_finite()) {
            problems.push(format!("cell_size must be positive, got {}", self.cell_size));
        }
        if !(0.0..=1.0).contains(&self.wall_removal_probability) {
            problems.push("wall_removal_probability must lie in [0, 1]".to_string());
        }
        if !(self.wall_thickness > 0.0) || !(self.agent_radius >= 0.0) || !(self.wall_height > 0.0) {
            problems.push("wall_thickness and wall_height must be positive, agent_radius non-negative".into());
        }
        if self.cell_size > 0.0 && 2.0 * self.erosion() >= self.cell_size {
            problems.push("walls plus clearance leave no walkable floor in a cell".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(SceneError::InvalidSpec(problems.join("; ")))
        }
    }
}

/// Wall layout of a maze. `wall_x[k][z]` is the wall on the line `x = k·s`
/// spanning cell row `z`; `wall_z[x][k]` lies on `z = k·s` spanning column `x`.
#[derive(Debug, Clone)]
pub(crate) struct Maze {
    pub nx: usize,
    pub nz: usize,
    pub wall_x: Vec<Vec<bool>>,
    pub wall_z: Vec<Vec<bool>>,
}

impl Maze {
    fn carve(nx: usize, nz: usize, removal: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut wall_x = vec![vec![true; nz]; nx + 1];
        let mut wall_z = vec![vec![true; nz + 1]; nx];
        let mut visited = vec![false; nx * nz];
        let mut stack = vec![(rng.gen_range(0..nx), rng.gen_range(0..nz))];
        visited[stack[0].1 * nx + stack[0].0] = true;
        while let Some(&(x, z)) = stack.last() {
            let mut options = [(0usize, 0usize, 0u8); 4];
            let mut n = 0;
            if x > 0 && !visited[z * nx + x - 1] {
                options[n] = (x - 1, z, 0);
                n += 1;
            }
            if x + 1 < nx && !visited[z * nx + x + 1] {
                options[n] = (x + 1, z, 1);
                n += 1;
            }
            if z > 0 && !visited[(z - 1) * nx + x] {
                options[n] = (x, z - 1, 2);
                n += 1;
            }
            if z + 1 < nz && !visited[(z + 1) * nx + x] {
                options[n] = (x, z + 1, 3);
                n += 1;
            }
            if n == 0 {
                stack.pop();
                continue;
            }
            let (x2, z2, dir) = options[rng.gen_range(0..n)];
            match dir {
                0 => wall_x[x][z] = false,
                1 => wall_x[x + 1][z] = false,
                2 => wall_z[x][z] = false,
                _ => wall_z[x][z + 1] = false,
            }
            visited[z2 * nx + x2] = true;
            stack.push((x2, z2));
        }
        for k in 1..nx {
            for z in 0..nz {
                if wall_x[k][z] && rng.gen_bool(removal) {
                    wall_x[k][z] = false;
                }
            }
        }
        for x in 0..nx {
            for k in 1..nz {
                if wall_z[x][k] && rng.gen_bool(removal) {
                    wall_z[x][k] = false;
                }
            }
        }
        Maze { nx, nz, wall_x, wall_z }
    }

    /// Whether any wall touches the grid vertex `(kx, kz)`.
    fn post_at(&self, kx: usize, kz: usize) -> bool {
        (kz > 0 && self.wall_x[kx][kz - 1])
            || (kz < self.nz && self.wall_x[kx][kz])
            || (kx > 0 && self.wall_z[kx - 1][kz])
            || (kx < self.nx && self.wall_z[kx][kz])
    }
}

#[derive(Clone, Copy)]
enum Band {
    Core(usize),
    Gap(usize),
}

/// Generate a maze interior. A pure function of `(seed, spec)`.
pub fn generate_scene(seed: u64, spec: &GeneratorSpec) -> Result<SceneAsset, SceneError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (nx, nz) = (spec.cells_x as usize, spec.cells_z as usize);
    let maze = Maze::carve(nx, nz, spec.wall_removal_probability, &mut rng);
    let navmesh = build_navmesh(&maze, spec)?;
    let (vertices, triangles, colors) = build_render_mesh(&maze, spec, &mut rng);
    SceneAsset::new(vertices, triangles, Some(colors), navmesh)
}

fn bands(n: usize, s: f64, e: f64) -> Vec<(Band, f64, f64)> {
    let mut out = Vec::with_capacity(2 * n);
    for c in 0..n {
        if c > 0 {
            out.push((Band::Gap(c), c as f64 * s - e, c as f64 * s + e));
        }
        out.push((Band::Core(c), c as f64 * s + e, (c + 1) as f64 * s - e));
    }
    out
}

fn build_navmesh(maze: &Maze, spec: &GeneratorSpec) -> Result<NavMesh, SceneError> {
    let s = spec.cell_size;
    let e = spec.erosion();
    let xb = bands(maze.nx, s, e);
    let zb = bands(maze.nz, s, e);
    let free = |bx: Band, bz: Band| match (bx, bz) {
        (Band::Core(_), Band::Core(_)) => true,
        (Band::Gap(k), Band::Core(z)) => !maze.wall_x[k][z],
        (Band::Core(x), Band::Gap(k)) => !maze.wall_z[x][k],
        (Band::Gap(kx), Band::Gap(kz)) => !maze.post_at(kx, kz),
    };
    // breakpoint lattice: (xb.len()+1) × (zb.len()+1) corners
    let cols = xb.len() + 1;
    let corner_x: Vec<f64> = std::iter::once(xb[0].1).chain(xb.iter().map(|b| b.2)).collect();
    let corner_z: Vec<f64> = std::iter::once(zb[0].1).chain(zb.iter().map(|b| b.2)).collect();
    let mut remap = vec![u32::MAX; cols * (zb.len() + 1)];
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    let mut vid = |i: usize, j: usize, vertices: &mut Vec<DVec3>| {
        let k = j * cols + i;
        if remap[k] == u32::MAX {
            remap[k] = vertices.len() as u32;
            vertices.push(DVec3::new(corner_x[i], 0.0, corner_z[j]));
        }
        remap[k]
    };
    for (j, &(bz, _, _)) in zb.iter().enumerate() {
        for (i, &(bx, _, _)) in xb.iter().enumerate() {
            if !free(bx, bz) {
                continue;
            }
            let v00 = vid(i, j, &mut vertices);
            let v10 = vid(i + 1, j, &mut vertices);
            let v11 = vid(i + 1, j + 1, &mut vertices);
            let v01 = vid(i, j + 1, &mut vertices);
            triangles.push([v00, v10, v11]);
            triangles.push([v00, v11, v01]);
        }
    }
    NavMesh::new(vertices, triangles)
}

fn pastel(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [
        rng.gen_range(0.55..0.95),
        rng.gen_range(0.55..0.95),
        rng.gen_range(0.55..0.95),
    ]
}

type RenderMesh = (Vec<DVec3>, Vec<[u32; 3]>, Vec<[f32; 3]>);

fn build_render_mesh(maze: &Maze, spec: &GeneratorSpec, rng: &mut ChaCha8Rng) -> RenderMesh {
    let s = spec.cell_size;
    let h = spec.wall_height;
    let half = spec.wall_thickness * 0.5;
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    let mut colors = Vec::new();
    let mut quad = |corners: [DVec3; 4], color: [f32; 3]| {
        let base = vertices.len() as u32;
        vertices.extend_from_slice(&corners);
        colors.extend_from_slice(&[color; 4]);
        // counter-clockwise seen from the visible side
        triangles.push([base, base + 2, base + 1]);
        triangles.push([base, base + 3, base + 2]);
    };
    for z in 0..maze.nz {
        for x in 0..maze.nx {
            let (x0, x1) = (x as f64 * s, (x + 1) as f64 * s);
            let (z0, z1) = (z as f64 * s, (z + 1) as f64 * s);
            let floor = pastel(rng);
            quad(
                [
                    DVec3::new(x0, 0.0, z0),
                    DVec3::new(x1, 0.0, z0),
                    DVec3::new(x1, 0.0, z1),
                    DVec3::new(x0, 0.0, z1),
                ],
                floor,
            );
            let ceil = floor.map(|c| 0.5 + 0.5 * c);
            quad(
                [
                    DVec3::new(x0, h, z0),
                    DVec3::new(x0, h, z1),
                    DVec3::new(x1, h, z1),
                    DVec3::new(x1, h, z0),
                ],
                ceil,
            );
        }
    }
    let mut wall_box = |lo: DVec3, hi: DVec3, color: [f32; 3]| {
        let c = |x: f64, y: f64, z: f64| DVec3::new(x, y, z);
        quad(
            [
                c(lo.x, lo.y, lo.z),
                c(hi.x, lo.y, lo.z),
                c(hi.x, hi.y, lo.z),
                c(lo.x, hi.y, lo.z),
            ],
            color,
        );
        quad(
            [
                c(hi.x, lo.y, hi.z),
                c(lo.x, lo.y, hi.z),
                c(lo.x, hi.y, hi.z),
                c(hi.x, hi.y, hi.z),
            ],
            color,
        );
        quad(
            [
                c(lo.x, lo.y, hi.z),
                c(lo.x, lo.y, lo.z),
                c(lo.x, hi.y, lo.z),
                c(lo.x, hi.y, hi.z),
            ],
            color,
        );
        quad(
            [
                c(hi.x, lo.y, lo.z),
                c(hi.x, lo.y, hi.z),
                c(hi.x, hi.y, hi.z),
                c(hi.x, hi.y, lo.z),
            ],
            color,
        );
    };
    for k in 0..=maze.nx {
        for z in 0..maze.nz {
            if maze.wall_x[k][z] {
                let x = k as f64 * s;
                let color = pastel(rng);
                wall_box(
                    DVec3::new(x - half, 0.0, z as f64 * s - half),
                    DVec3::new(x + half, h, (z + 1) as f64 * s + half),
                    color,
                );
            }
        }
    }
    for x in 0..maze.nx {
        for k in 0..=maze.nz {
            if maze.wall_z[x][k] {
                let z = k as f64 * s;
                let color = pastel(rng);
                wall_box(
                    DVec3::new(x as f64 * s - half, 0.0, z - half),
                    DVec3::new((x + 1) as f64 * s + half, h, z + half),
                    color,
                );
            }
        }
    }
    // free-standing posts where walls meet only diagonally are covered by
    // the wall boxes themselves (every box extends half a thickness past its
    // end points)
    (vertices, triangles, colors)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn open_room_navmesh_area() {
        // 2x2 cells of 2 m with every interior wall removed: one 4 m room
        let spec = GeneratorSpec {
            cells_x: 2,
            cells_z: 2,
            cell_size: 2.0,
            wall_removal_probability: 1.0,
            ..GeneratorSpec::default()
        };
        let asset = generate_scene(3, &spec).unwrap();
        let area = asset.navmesh().area();
        assert!((area - 3.8 * 3.8).abs() < 1e-9, "area {area}");
    }

    #[test]
    fn rejects_degenerate_specs() {
        for spec in [
            GeneratorSpec {
                cells_x: 0,
                ..GeneratorSpec::default()
            },
            GeneratorSpec {
                cell_size: 0.0,
                ..GeneratorSpec::default()
            },
            GeneratorSpec {
                cell_size: 0.15,
                ..GeneratorSpec::default()
            },
        ] {
            assert!(matches!(generate_scene(1, &spec), Err(SceneError::InvalidSpec(_))));
        }
    }

    #[test]
    fn every_cell_reachable() {
        let spec = GeneratorSpec {
            wall_removal_probability: 0.0,
            ..GeneratorSpec::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let maze = Maze::carve(6, 5, 0.0, &mut rng);
        // a spanning tree over 30 cells removes exactly 29 walls
        let open_x: usize = maze.wall_x.iter().flatten().filter(|w| !**w).count();
        let open_z: usize = maze.wall_z.iter().flatten().filter(|w| !**w).count();
        assert_eq!(open_x + open_z, 29);
        let nav = build_navmesh(&maze, &spec).unwrap();
        // flood fill over triangle adjacency reaches everything
        let mut seen = vec![false; nav.triangle_count()];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(t) = stack.pop() {
            for &n in &nav.adjacency()[t] {
                if n >= 0 && !seen[n as usize] {
                    seen[n as usize] = true;
                    stack.push(n as usize);
                }
            }
        }
        assert!(seen.iter().all(|&s| s));
    }
}
