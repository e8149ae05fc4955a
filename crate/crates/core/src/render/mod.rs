//! Deterministic software batch renderer.
//!
//! A request renders N camera views into the tiles of one [`Megaframe`].
//! Frustum culling for view `i + 1` runs on its own thread while raster
//! workers fill view `i`; the output is independent of that schedule.

mod bench;
mod raster;

use std::io::Write;
use std::path::Path;
use std::sync::mpsc::{channel, sync_channel};
use std::sync::{Arc, Mutex};

use glam::DVec3;
use serde::{Deserialize, Serialize};

pub use bench::{camera_trace, render_bench, BenchOptions, BenchRow};

use crate::geom::{heading_dir, heading_right};
use crate::scene::{AssetResolver, SceneAsset, SceneId};

/// Camera height above the agent's floor position.
pub const DEFAULT_EYE_HEIGHT: f64 = 0.88;
pub const DEFAULT_FOV_DEGREES: f64 = 90.0;
pub const DEFAULT_NEAR: f64 = 0.01;
pub const DEFAULT_FAR: f64 = 20.0;

#[derive(Debug, thiserror::Error)]
pub enum RenderError {
    #[error("view {view}: scene {scene} is not resident")]
    AssetFault { view: usize, scene: SceneId },
    #[error("view {view}: {reason}")]
    InvalidView { view: usize, reason: String },
    #[error("invalid render configuration: {0}")]
    InvalidConfig(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A pinhole camera looking along `heading` in the horizontal plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraView {
    pub scene: SceneId,
    /// Eye position in meters.
    pub position: DVec3,
    pub heading: f64,
    /// Vertical field of view.
    pub fov_degrees: f64,
    pub near: f64,
    pub far: f64,
}

impl CameraView {
    pub fn new(scene: SceneId, position: DVec3, heading: f64) -> Self {
        Self {
            scene,
            position,
            heading,
            fov_degrees: DEFAULT_FOV_DEGREES,
            near: DEFAULT_NEAR,
            far: DEFAULT_FAR,
        }
    }

    /// Camera mounted `eye_height` above an agent standing at `agent`.
    pub fn for_agent(scene: SceneId, agent: DVec3, heading: f64, eye_height: f64) -> Self {
        Self::new(scene, agent + DVec3::Y * eye_height, heading)
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.near > 0.0 && self.near < self.far && self.far.is_finite()) {
            return Err(format!("need 0 < near < far, got near {} far {}", self.near, self.far));
        }
        if !(self.fov_degrees > 0.0 && self.fov_degrees < 180.0) {
            return Err(format!("field of view {} outside (0, 180)", self.fov_degrees));
        }
        if !self.position.is_finite() || !self.heading.is_finite() {
            return Err("non-finite pose".into());
        }
        Ok(())
    }

    fn basis(&self) -> Basis {
        Basis {
            eye: self.position,
            right: heading_right(self.heading),
            forward: heading_dir(self.heading),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Basis {
    eye: DVec3,
    right: DVec3,
    forward: DVec3,
}

impl Basis {
    /// Eye-space coordinates: x right, y up, z forward (depth).
    #[inline]
    fn to_eye(&self, p: DVec3) -> DVec3 {
        let d = p - self.eye;
        DVec3::new(d.dot(self.right), d.y, d.dot(self.forward))
    }
}

/// Triangle counts of one culling pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CullStats {
    pub triangles_in: u64,
    pub triangles_kept: u64,
    pub triangles_culled: u64,
}

impl std::ops::AddAssign for CullStats {
    fn add_assign(&mut self, o: Self) {
        self.triangles_in += o.triangles_in;
        self.triangles_kept += o.triangles_kept;
        self.triangles_culled += o.triangles_culled;
    }
}

/// Render-side copy of an asset's geometry.
#[derive(Debug, Clone)]
pub struct PreparedMesh {
    positions: Vec<DVec3>,
    triangles: Vec<[u32; 3]>,
    colors: Vec<[f32; 3]>,
    /// Right-hand normals; the front face is the side they point to.
    normals: Vec<DVec3>,
    chunks: Vec<Chunk>,
}

/// Bounding sphere of a run of consecutive triangles.
#[derive(Debug, Clone, Copy)]
struct Chunk {
    start: u32,
    end: u32,
    center: DVec3,
    radius: f64,
}

const CHUNK_TRIANGLES: usize = 16;

fn build_chunks(p: &[DVec3], tris: &[[u32; 3]]) -> Vec<Chunk> {
    tris.chunks(CHUNK_TRIANGLES)
        .enumerate()
        .map(|(k, ts)| {
            let mut lo = DVec3::splat(f64::INFINITY);
            let mut hi = DVec3::splat(f64::NEG_INFINITY);
            for t in ts {
                for &v in t {
                    lo = lo.min(p[v as usize]);
                    hi = hi.max(p[v as usize]);
                }
            }
            let center = (lo + hi) * 0.5;
            let radius = ts
                .iter()
                .flat_map(|t| t.iter())
                .map(|&v| p[v as usize].distance(center))
                .fold(0.0, f64::max);
            let start = (k * CHUNK_TRIANGLES) as u32;
            Chunk {
                start,
                end: start + ts.len() as u32,
                center,
                radius: radius * (1.0 + 1e-9) + 1e-9,
            }
        })
        .collect()
}

impl PreparedMesh {
    pub fn new(asset: &SceneAsset) -> Self {
        let colors = match asset.colors() {
            Some(c) => c.to_vec(),
            None => vec![[0.7, 0.7, 0.7]; asset.vertices().len()],
        };
        let p = asset.vertices();
        let normals = asset
            .triangles()
            .iter()
            .map(|&[a, b, c]| (p[b as usize] - p[a as usize]).cross(p[c as usize] - p[a as usize]))
            .collect();
        Self {
            positions: p.to_vec(),
            triangles: asset.triangles().to_vec(),
            colors,
            normals,
            chunks: build_chunks(p, asset.triangles()),
        }
    }

    pub fn triangle_count(&self) -> usize {
        self.triangles.len()
    }
}

/// The six frustum half-spaces in eye space, slightly widened so that the
/// test stays conservative with respect to pixel snapping.
#[derive(Debug, Clone, Copy)]
struct Frustum {
    near: f64,
    far: f64,
    tan_x: f64,
    tan_y: f64,
}

impl Frustum {
    fn new(view: &CameraView, aspect: f64) -> Self {
        let tan_y = (view.fov_degrees.to_radians() / 2.0).tan();
        Self {
            near: view.near,
            far: view.far * (1.0 + 1e-6),
            tan_x: tan_y * aspect * 1.05,
            tan_y: tan_y * 1.05,
        }
    }

    /// Bitmask of planes `p` lies outside of.
    #[inline]
    fn outcode(&self, p: DVec3) -> u8 {
        let mut c = 0;
        if p.z < self.near {
            c |= 1;
        }
        if p.z > self.far {
            c |= 2;
        }
        if p.x > self.tan_x * p.z {
            c |= 4;
        }
        if p.x < -self.tan_x * p.z {
            c |= 8;
        }
        if p.y > self.tan_y * p.z {
            c |= 16;
        }
        if p.y < -self.tan_y * p.z {
            c |= 32;
        }
        c
    }

    /// True when a sphere (eye-space centre) lies entirely outside one plane.
    fn sphere_outside(&self, c: DVec3, r: f64) -> bool {
        let nx = (1.0 + self.tan_x * self.tan_x).sqrt();
        let ny = (1.0 + self.tan_y * self.tan_y).sqrt();
        c.z + r < self.near
            || c.z - r > self.far
            || c.x - self.tan_x * c.z > r * nx
            || -c.x - self.tan_x * c.z > r * nx
            || c.y - self.tan_y * c.z > r * ny
            || -c.y - self.tan_y * c.z > r * ny
    }
}

/// Output of the culling stage for one view.
struct CulledView {
    index: usize,
    eye: Vec<DVec3>,
    visible: Vec<u32>,
    stats: CullStats,
}

fn cull_view(index: usize, mesh: &PreparedMesh, view: &CameraView, aspect: f64, enabled: bool) -> CulledView {
    let basis = view.basis();
    let n = mesh.triangles.len() as u64;
    let (eye, visible) = if enabled {
        let frustum = Frustum::new(view, aspect);
        // vertices are transformed on first use; untouched entries stay NaN
        let mut eye = vec![DVec3::NAN; mesh.positions.len()];
        let mut codes = vec![u8::MAX; mesh.positions.len()];
        let mut kept = Vec::new();
        for ch in &mesh.chunks {
            if frustum.sphere_outside(basis.to_eye(ch.center), ch.radius) {
                continue;
            }
            for t in ch.start..ch.end {
                let mut all = 0xff;
                for v in mesh.triangles[t as usize] {
                    let v = v as usize;
                    if codes[v] == u8::MAX {
                        eye[v] = basis.to_eye(mesh.positions[v]);
                        codes[v] = frustum.outcode(eye[v]);
                    }
                    all &= codes[v];
                }
                if all == 0 {
                    kept.push(t);
                }
            }
        }
        (eye, kept)
    } else {
        let eye = mesh.positions.iter().map(|&p| basis.to_eye(p)).collect();
        (eye, (0..mesh.triangles.len() as u32).collect())
    };
    let kept = visible.len() as u64;
    CulledView {
        index,
        eye,
        visible,
        stats: CullStats {
            triangles_in: n,
            triangles_kept: kept,
            triangles_culled: n - kept,
        },
    }
}

/// Triangles of `asset` that may be visible from `view` (square viewport).
pub fn cull_frustum(asset: &SceneAsset, view: &CameraView) -> (Vec<u32>, CullStats) {
    let c = cull_view(0, asset.prepared(), view, 1.0, true);
    (c.visible, c.stats)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sensor {
    Depth,
    Rgb,
}

/// Per-request renderer settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub tile_width: usize,
    pub tile_height: usize,
    pub sensor: Sensor,
    /// Render at `supersample`× resolution and box-downsample (1 or 2).
    pub supersample: usize,
    /// Frustum culling ahead of rasterization.
    pub culling: bool,
    /// Skip triangles seen from behind (clockwise on screen).
    pub backface_culling: bool,
    pub pipelined: bool,
    /// Raster worker threads in pipelined mode.
    pub workers: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            tile_width: 64,
            tile_height: 64,
            sensor: Sensor::Depth,
            supersample: 1,
            culling: true,
            backface_culling: true,
            pipelined: true,
            workers: 1,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<(), RenderError> {
        if self.tile_width == 0 || self.tile_height == 0 || self.tile_width > 4096 || self.tile_height > 4096 {
            return Err(RenderError::InvalidConfig(format!(
                "tile size {}x{} out of range",
                self.tile_width, self.tile_height
            )));
        }
        if !matches!(self.supersample, 1 | 2) {
            return Err(RenderError::InvalidConfig("supersample must be 1 or 2".into()));
        }
        if self.workers == 0 {
            return Err(RenderError::InvalidConfig("need at least one raster worker".into()));
        }
        Ok(())
    }
}

/// One framebuffer holding N observation tiles in a row-major grid with
/// `ceil(sqrt(N))` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Megaframe {
    pub tile_width: usize,
    pub tile_height: usize,
    pub tiles: usize,
    pub columns: usize,
    pub rows: usize,
    /// Eye-space depth in meters.
    pub depth: Vec<f32>,
    pub color: Option<Vec<[f32; 3]>>,
    /// Far plane of each tile's view.
    pub tile_far: Vec<f32>,
    pub stats: CullStats,
}

pub fn layout_columns(tiles: usize) -> usize {
    let mut c = (tiles as f64).sqrt().ceil() as usize;
    while c * c < tiles {
        c += 1;
    }
    while c > 1 && (c - 1) * (c - 1) >= tiles {
        c -= 1;
    }
    c.max(1)
}

impl Megaframe {
    /// Allocate a frame with every pixel set to `fill`.
    pub fn new(tiles: usize, tile_width: usize, tile_height: usize, color: bool, fill: f32) -> Self {
        let columns = layout_columns(tiles);
        let rows = tiles.div_ceil(columns);
        let len = columns * tile_width * rows * tile_height;
        Self {
            tile_width,
            tile_height,
            tiles,
            columns,
            rows,
            depth: vec![fill; len],
            color: color.then(|| vec![[fill; 3]; len]),
            tile_far: vec![0.0; tiles],
            stats: CullStats::default(),
        }
    }

    pub fn width(&self) -> usize {
        self.columns * self.tile_width
    }

    pub fn height(&self) -> usize {
        self.rows * self.tile_height
    }

    /// Linear index of pixel `(x, y)` of tile `i`.
    #[inline]
    pub fn pixel_index(&self, i: usize, x: usize, y: usize) -> usize {
        let (row, col) = (i / self.columns, i % self.columns);
        (row * self.tile_height + y) * self.width() + col * self.tile_width + x
    }

    fn blit(&mut self, i: usize, depth: &[f32], color: Option<&[[f32; 3]]>) {
        let w = self.tile_width;
        for y in 0..self.tile_height {
            let dst = self.pixel_index(i, 0, y);
            self.depth[dst..dst + w].copy_from_slice(&depth[y * w..(y + 1) * w]);
            if let (Some(plane), Some(src)) = (self.color.as_mut(), color) {
                plane[dst..dst + w].copy_from_slice(&src[y * w..(y + 1) * w]);
            }
        }
    }

    /// Depth of tile `i` in row-major order.
    pub fn tile_depth(&self, i: usize) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.tile_width * self.tile_height);
        for y in 0..self.tile_height {
            let s = self.pixel_index(i, 0, y);
            out.extend_from_slice(&self.depth[s..s + self.tile_width]);
        }
        out
    }

    /// Depth of tile `i` divided by its far plane, written into `out`.
    pub fn write_depth_observation(&self, i: usize, out: &mut [f32]) {
        let w = self.tile_width;
        let inv = 1.0 / self.tile_far[i];
        for y in 0..self.tile_height {
            let s = self.pixel_index(i, 0, y);
            for (o, d) in out[y * w..(y + 1) * w].iter_mut().zip(&self.depth[s..s + w]) {
                *o = d * inv;
            }
        }
    }

    /// Color of tile `i` as three planes (R, G, B), written into `out`.
    pub fn write_rgb_observation(&self, i: usize, out: &mut [f32]) {
        let Some(color) = &self.color else { return };
        let (w, h) = (self.tile_width, self.tile_height);
        for y in 0..h {
            let s = self.pixel_index(i, 0, y);
            for x in 0..w {
                let c = color[s + x];
                for ch in 0..3 {
                    out[ch * w * h + y * w + x] = c[ch];
                }
            }
        }
    }

    /// Write the depth plane as a binary PGM, mapping `[0, far]` to `[255, 0]`.
    pub fn write_pgm(&self, path: &Path) -> Result<(), RenderError> {
        let far = self.tile_far.iter().copied().fold(f32::MIN_POSITIVE, f32::max);
        let mut bytes = format!("P5\n{} {}\n255\n", self.width(), self.height()).into_bytes();
        bytes.extend(
            self.depth
                .iter()
                .map(|d| (255.0 * (1.0 - (d / far).clamp(0.0, 1.0))).round() as u8),
        );
        write_file(path, &bytes)
    }

    /// Write the color plane (or depth as gray when absent) as a binary PPM.
    pub fn write_ppm(&self, path: &Path) -> Result<(), RenderError> {
        let Some(color) = &self.color else {
            return self.write_pgm(path);
        };
        let mut bytes = format!("P6\n{} {}\n255\n", self.width(), self.height()).into_bytes();
        for c in color {
            bytes.extend(c.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        }
        write_file(path, &bytes)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), RenderError> {
    let io = |source| RenderError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = std::fs::File::create(path).map_err(io)?;
    f.write_all(bytes).map_err(io)
}

fn resolve_all(views: &[CameraView], resolver: &dyn AssetResolver) -> Result<Vec<Arc<SceneAsset>>, RenderError> {
    views
        .iter()
        .enumerate()
        .map(|(i, v)| {
            v.validate()
                .map_err(|reason| RenderError::InvalidView { view: i, reason })?;
            resolver.resolve(v.scene).ok_or(RenderError::AssetFault {
                view: i,
                scene: v.scene,
            })
        })
        .collect()
}

struct Tile {
    depth: Vec<f32>,
    color: Option<Vec<[f32; 3]>>,
}

fn raster_culled(c: &CulledView, mesh: &PreparedMesh, view: &CameraView, cfg: &RenderConfig) -> Tile {
    let s = cfg.supersample;
    let (w, h) = (cfg.tile_width * s, cfg.tile_height * s);
    let want_color = cfg.sensor == Sensor::Rgb;
    let mut target = raster::Target::new(w, h, view.far as f32, want_color);
    raster::draw(&mut target, mesh, &c.eye, &c.visible, view, cfg.backface_culling);
    target.resolve(view.near as f32, view.far as f32);
    let (depth, color) = if s == 1 {
        (target.depth, target.color)
    } else {
        raster::downsample2(&target, cfg.tile_width, cfg.tile_height)
    };
    Tile { depth, color }
}

/// Render `views` into a new megaframe.
pub fn render_batch(
    views: &[CameraView],
    resolver: &dyn AssetResolver,
    cfg: &RenderConfig,
) -> Result<Megaframe, RenderError> {
    if views.is_empty() {
        return Err(RenderError::InvalidConfig(
            "a render request needs at least one view".into(),
        ));
    }
    cfg.validate()?;
    let mut frame = Megaframe::new(
        views.len(),
        cfg.tile_width,
        cfg.tile_height,
        cfg.sensor == Sensor::Rgb,
        0.0,
    );
    render_batch_into(views, resolver, cfg, &mut frame)?;
    Ok(frame)
}

/// Render `views` into an existing megaframe, touching only the tile pixels.
pub fn render_batch_into(
    views: &[CameraView],
    resolver: &dyn AssetResolver,
    cfg: &RenderConfig,
    frame: &mut Megaframe,
) -> Result<(), RenderError> {
    cfg.validate()?;
    if frame.tiles != views.len() || frame.tile_width != cfg.tile_width || frame.tile_height != cfg.tile_height {
        return Err(RenderError::InvalidConfig(
            "megaframe shape does not match the request".into(),
        ));
    }
    if (cfg.sensor == Sensor::Rgb) != frame.color.is_some() {
        return Err(RenderError::InvalidConfig(
            "megaframe color plane does not match the sensor".into(),
        ));
    }
    let assets = resolve_all(views, resolver)?;
    let aspect = cfg.tile_width as f64 / cfg.tile_height as f64;
    frame.stats = CullStats::default();
    for (i, v) in views.iter().enumerate() {
        frame.tile_far[i] = v.far as f32;
    }

    if !cfg.pipelined {
        for (i, (view, asset)) in views.iter().zip(&assets).enumerate() {
            let mesh = asset.prepared();
            let culled = cull_view(i, mesh, view, aspect, cfg.culling);
            frame.stats += culled.stats;
            let tile = raster_culled(&culled, mesh, view, cfg);
            frame.blit(i, &tile.depth, tile.color.as_deref());
        }
        return Ok(());
    }

    // views travel between stages in small groups to limit hand-off costs
    let group = (views.len() / (4 * cfg.workers)).clamp(1, 16);
    let (cull_tx, cull_rx) = sync_channel::<Vec<CulledView>>(2);
    let cull_rx = Mutex::new(cull_rx);
    std::thread::scope(|s| {
        let assets = &assets;
        s.spawn(move || {
            let indices: Vec<usize> = (0..views.len()).collect();
            for chunk in indices.chunks(group) {
                let culled = chunk
                    .iter()
                    .map(|&i| cull_view(i, assets[i].prepared(), &views[i], aspect, cfg.culling))
                    .collect();
                if cull_tx.send(culled).is_err() {
                    break;
                }
            }
        });
        let (tile_tx, tile_rx) = channel::<Vec<(usize, CullStats, Tile)>>();
        for _ in 0..cfg.workers.min(views.len()) {
            let tile_tx = tile_tx.clone();
            let cull_rx = &cull_rx;
            s.spawn(move || loop {
                let job = match cull_rx.lock() {
                    Ok(rx) => rx.recv(),
                    Err(_) => break,
                };
                let Ok(chunk) = job else { break };
                let tiles = chunk
                    .iter()
                    .map(|c| {
                        (
                            c.index,
                            c.stats,
                            raster_culled(c, assets[c.index].prepared(), &views[c.index], cfg),
                        )
                    })
                    .collect();
                if tile_tx.send(tiles).is_err() {
                    break;
                }
            });
        }
        drop(tile_tx);
        for (i, stats, tile) in tile_rx.into_iter().flatten() {
            frame.stats += stats;
            frame.blit(i, &tile.depth, tile.color.as_deref());
        }
    });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_square_grid() {
        assert_eq!(layout_columns(1), 1);
        assert_eq!(layout_columns(2), 2);
        assert_eq!(layout_columns(4), 2);
        assert_eq!(layout_columns(5), 3);
        assert_eq!(layout_columns(256), 16);
        assert_eq!(layout_columns(257), 17);
        let f = Megaframe::new(5, 4, 3, false, 0.0);
        assert_eq!((f.columns, f.rows, f.width(), f.height()), (3, 2, 12, 6));
        assert_eq!(f.pixel_index(4, 1, 2), (3 + 2) * 12 + 4 + 1);
    }
}
