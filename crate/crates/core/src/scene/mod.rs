//! Scene assets: render geometry, vertex colors and the navigation mesh,
//! plus procedural generation, the on-disk container and the K-resident
//! asset store.

mod format;
mod generate;
mod navmesh;
mod store;

use std::fmt;
use std::sync::OnceLock;

use glam::DVec3;
use serde::{Deserialize, Serialize};

pub use format::{decode_scene, encode_scene, load_scene, save_scene, SCENE_MAGIC, SCENE_VERSION};
pub use generate::{generate_scene, GeneratorSpec};
pub use navmesh::{BoundarySegment, NavMesh, MIN_TRIANGLE_AREA, ON_MESH_EPS};
pub use store::{
    AssetHandle, AssetResolver, AssetStore, DirectorySource, GeneratedSource, SceneSource, StoreSnapshot, StoreState,
    DEFAULT_SHARE_CAP,
};

use crate::geom::Aabb;

#[derive(Debug, thiserror::Error)]
pub enum SceneError {
    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("scene content hash mismatch: stored {stored}, computed {computed}")]
    Corrupt { stored: SceneId, computed: SceneId },
    #[error("asset store saturated: {0}")]
    Saturated(String),
    #[error("scene {0} is not known to the scene source")]
    UnknownScene(SceneId),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Content hash identifying a scene (SHA-256 of its canonical encoding).
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SceneId(pub [u8; 32]);

impl SceneId {
    pub fn to_hex(&self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        if s.len() != 64 {
            return None;
        }
        let mut out = [0u8; 32];
        for (i, chunk) in s.as_bytes().chunks(2).enumerate() {
            let hex = std::str::from_utf8(chunk).ok()?;
            out[i] = u8::from_str_radix(hex, 16).ok()?;
        }
        Some(Self(out))
    }
}

impl fmt::Display for SceneId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for SceneId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SceneId({})", &self.to_hex()[..12])
    }
}

impl Serialize for SceneId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for SceneId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        SceneId::from_hex(&s).ok_or_else(|| serde::de::Error::custom("expected 64 hex digits"))
    }
}

/// One environment's geometry: render mesh, optional vertex colors and the
/// navigation mesh. Immutable once built; `id` is derived from the content.
#[derive(Debug, Clone)]
pub struct SceneAsset {
    id: SceneId,
    vertices: Vec<DVec3>,
    triangles: Vec<[u32; 3]>,
    colors: Option<Vec<[f32; 3]>>,
    navmesh: NavMesh,
    bounds: Aabb,
    render_cache: OnceLock<crate::render::PreparedMesh>,
}

impl PartialEq for SceneAsset {
    fn eq(&self, other: &Self) -> bool {
        self.id == other.id
            && self.vertices == other.vertices
            && self.triangles == other.triangles
            && self.colors == other.colors
            && self.navmesh == other.navmesh
            && self.bounds == other.bounds
    }
}

impl SceneAsset {
    /// Assemble an asset, validating indices and computing bounds and id.
    pub fn new(
        vertices: Vec<DVec3>,
        triangles: Vec<[u32; 3]>,
        colors: Option<Vec<[f32; 3]>>,
        navmesh: NavMesh,
    ) -> Result<Self, SceneError> {
        let bounds = Aabb::from_points(&vertices);
        let asset = Self::from_parts_unhashed(vertices, triangles, colors, navmesh, bounds)?;
        let id = format::content_hash(&asset);
        Ok(Self { id, ..asset })
    }

    pub(crate) fn from_parts_unhashed(
        vertices: Vec<DVec3>,
        triangles: Vec<[u32; 3]>,
        colors: Option<Vec<[f32; 3]>>,
        navmesh: NavMesh,
        bounds: Aabb,
    ) -> Result<Self, SceneError> {
        if let Some((t, _)) = triangles
            .iter()
            .enumerate()
            .find(|(_, tri)| tri.iter().any(|&i| i as usize >= vertices.len()))
        {
            return Err(SceneError::InvalidMesh(format!(
                "render triangle {t} index out of range"
            )));
        }
        if let Some(c) = &colors {
            if c.len() != vertices.len() {
                return Err(SceneError::InvalidMesh(
                    "vertex color count differs from vertex count".into(),
                ));
            }
        }
        if navmesh.vertices().iter().any(|v| !bounds.contains(*v, 1e-9)) {
            return Err(SceneError::InvalidMesh("navmesh vertex outside scene bounds".into()));
        }
        Ok(Self {
            id: SceneId([0; 32]),
            vertices,
            triangles,
            colors,
            navmesh,
            bounds,
            render_cache: OnceLock::new(),
        })
    }

    pub(crate) fn with_id(mut self, id: SceneId) -> Self {
        self.id = id;
        self
    }

    pub fn id(&self) -> SceneId {
        self.id
    }

    pub fn vertices(&self) -> &[DVec3] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[u32; 3]] {
        &self.triangles
    }

    pub fn colors(&self) -> Option<&[[f32; 3]]> {
        self.colors.as_deref()
    }

    pub fn navmesh(&self) -> &NavMesh {
        &self.navmesh
    }

    pub fn bounds(&self) -> Aabb {
        self.bounds
    }

    /// Render-side geometry, built once per asset.
    pub(crate) fn prepared(&self) -> &crate::render::PreparedMesh {
        self.render_cache.get_or_init(|| crate::render::PreparedMesh::new(self))
    }
}
