//! Binary scene container.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic    [u8; 4]  = "BSCN"
//! version  u32      = 1
//! sections u32      = number of table entries
//! table    sections × { tag [u8; 4], offset u64, length u64 }
//! payload  section bodies at the offsets given in the table
//! trailer  [u8; 32] SHA-256 of every preceding byte (the scene id)
//! ```
//!
//! Sections: `VERT` (u64 n, n×3 f64), `TRIS` (u64 n, n×3 u32), `COLR`
//! (optional; u64 n, n×3 f32), `NAVV` (u64 n, n×3 f64), `NAVT` (u64 n,
//! n×3 u32), `NAVA` (u64 n, n×3 i32), `BNDS` (6 f64: min xyz, max xyz).

use std::path::Path;

use glam::DVec3;
use sha2::{Digest, Sha256};

use super::{NavMesh, SceneAsset, SceneError, SceneId};
use crate::geom::Aabb;

pub const SCENE_MAGIC: [u8; 4] = *b"BSCN";
pub const SCENE_VERSION: u32 = 1;

const HEADER_LEN: usize = 12;
const ENTRY_LEN: usize = 20;
const HASH_LEN: usize = 32;

fn encode_body(asset: &SceneAsset) -> Vec<u8> {
    let mut sections: Vec<([u8; 4], Vec<u8>)> = Vec::new();

    let mut vert = Vec::with_capacity(8 + asset.vertices().len() * 24);
    put_vec3s(&mut vert, asset.vertices());
    sections.push((*b"VERT", vert));

    let mut tris = Vec::new();
    put_u32x3(&mut tris, asset.triangles());
    sections.push((*b"TRIS", tris));

    if let Some(colors) = asset.colors() {
        let mut colr = Vec::new();
        colr.extend_from_slice(&(colors.len() as u64).to_le_bytes());
        for c in colors {
            for x in c {
                colr.extend_from_slice(&x.to_le_bytes());
            }
        }
        sections.push((*b"COLR", colr));
    }

    let nav = asset.navmesh();
    let mut navv = Vec::new();
    put_vec3s(&mut navv, nav.vertices());
    sections.push((*b"NAVV", navv));
    let mut navt = Vec::new();
    put_u32x3(&mut navt, nav.triangles());
    sections.push((*b"NAVT", navt));
    let mut nava = Vec::new();
    nava.extend_from_slice(&(nav.adjacency().len() as u64).to_le_bytes());
    for a in nav.adjacency() {
        for x in a {
            nava.extend_from_slice(&x.to_le_bytes());
        }
    }
    sections.push((*b"NAVA", nava));

    let b = asset.bounds();
    let mut bnds = Vec::with_capacity(48);
    for x in [b.min.x, b.min.y, b.min.z, b.max.x, b.max.y, b.max.z] {
        bnds.extend_from_slice(&x.to_le_bytes());
    }
    sections.push((*b"BNDS", bnds));

    let table_end = HEADER_LEN + ENTRY_LEN * sections.len();
    let total: usize = table_end + sections.iter().map(|s| s.1.len()).sum::<usize>();
    let mut out = Vec::with_capacity(total + HASH_LEN);
    out.extend_from_slice(&SCENE_MAGIC);
    out.extend_from_slice(&SCENE_VERSION.to_le_bytes());
    out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
    let mut offset = table_end as u64;
    for (tag, body) in &sections {
        out.extend_from_slice(tag);
        out.extend_from_slice(&offset.to_le_bytes());
        out.extend_from_slice(&(body.len() as u64).to_le_bytes());
        offset += body.len() as u64;
    }
    for (_, body) in sections {
        out.extend_from_slice(&body);
    }
    out
}

fn put_vec3s(out: &mut Vec<u8>, v: &[DVec3]) {
    out.extend_from_slice(&(v.len() as u64).to_le_bytes());
    for p in v {
        for x in [p.x, p.y, p.z] {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
}

fn put_u32x3(out: &mut Vec<u8>, v: &[[u32; 3]]) {
    out.extend_from_slice(&(v.len() as u64).to_le_bytes());
    for t in v {
        for x in t {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
}

pub(super) fn content_hash(asset: &SceneAsset) -> SceneId {
    SceneId(Sha256::digest(encode_body(asset)).into())
}

/// Serialize an asset, including the trailing content hash.
pub fn encode_scene(asset: &SceneAsset) -> Vec<u8> {
    let mut body = encode_body(asset);
    let hash: [u8; 32] = Sha256::digest(&body).into();
    body.extend_from_slice(&hash);
    body
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    end: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, message: impl Into<String>) -> SceneError {
        SceneError::Parse {
            offset: self.pos,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], SceneError> {
        if self.end - self.pos < n {
            return Err(self.err(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, SceneError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn i32(&mut self, what: &str) -> Result<i32, SceneError> {
        Ok(i32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64, SceneError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self, what: &str) -> Result<f64, SceneError> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f32(&mut self, what: &str) -> Result<f32, SceneError> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    /// Read an element count and check that `count * elem` bytes remain.
    fn count(&mut self, elem: usize, what: &str) -> Result<usize, SceneError> {
        let n = self.u64(what)?;
        let need = (n as u128) * elem as u128;
        if need > (self.end - self.pos) as u128 {
            return Err(self.err(format!("{what} declares {n} elements but the section is too short")));
        }
        Ok(n as usize)
    }

    fn vec3s(&mut self, what: &str) -> Result<Vec<DVec3>, SceneError> {
        let n = self.count(24, what)?;
        (0..n)
            .map(|_| Ok(DVec3::new(self.f64(what)?, self.f64(what)?, self.f64(what)?)))
            .collect()
    }

    fn u32x3(&mut self, what: &str) -> Result<Vec<[u32; 3]>, SceneError> {
        let n = self.count(12, what)?;
        (0..n)
            .map(|_| Ok([self.u32(what)?, self.u32(what)?, self.u32(what)?]))
            .collect()
    }

    fn finish(&self, what: &str) -> Result<(), SceneError> {
        if self.pos != self.end {
            return Err(self.err(format!("{} trailing bytes in {what}", self.end - self.pos)));
        }
        Ok(())
    }
}

/// Parse a scene container. Never returns a partially read asset.
pub fn decode_scene(bytes: &[u8]) -> Result<SceneAsset, SceneError> {
    if bytes.is_empty() {
        return Err(SceneError::Parse {
            offset: 0,
            message: "empty file".into(),
        });
    }
    let mut head = Reader {
        bytes,
        pos: 0,
        end: bytes.len(),
    };
    if head.take(4, "magic")? != SCENE_MAGIC {
        return Err(SceneError::Parse {
            offset: 0,
            message: "bad magic".into(),
        });
    }
    let version = head.u32("version")?;
    if version != SCENE_VERSION {
        return Err(head.err(format!("unsupported version {version}")));
    }
    let n_sections = head.u32("section count")? as usize;
    let mut table = Vec::with_capacity(n_sections.min(64));
    for _ in 0..n_sections {
        let tag: [u8; 4] = head.take(4, "section tag")?.try_into().expect("4 bytes");
        let offset = head.u64("section offset")? as usize;
        let length = head.u64("section length")? as usize;
        table.push((tag, offset, length));
    }
    let payload_end = table
        .iter()
        .map(|&(_, o, l)| o.saturating_add(l))
        .max()
        .unwrap_or(head.pos);
    if payload_end > bytes.len() {
        return Err(SceneError::Parse {
            offset: bytes.len(),
            message: format!("truncated: sections extend to byte {payload_end}"),
        });
    }
    if bytes.len() < payload_end + HASH_LEN {
        return Err(SceneError::Parse {
            offset: bytes.len(),
            message: "truncated: missing content hash trailer".into(),
        });
    }
    if bytes.len() != payload_end + HASH_LEN {
        return Err(SceneError::Parse {
            offset: payload_end + HASH_LEN,
            message: "unexpected bytes after content hash".into(),
        });
    }
    let section = |tag: &[u8; 4]| -> Option<Reader<'_>> {
        table.iter().find(|(t, _, _)| t == tag).map(|&(_, o, l)| Reader {
            bytes,
            pos: o,
            end: o + l,
        })
    };
    let require = |tag: &[u8; 4]| {
        section(tag).ok_or_else(|| SceneError::Parse {
            offset: HEADER_LEN,
            message: format!("missing section {}", String::from_utf8_lossy(tag)),
        })
    };

    let mut r = require(b"VERT")?;
    let vertices = r.vec3s("vertex block")?;
    r.finish("vertex block")?;
    let mut r = require(b"TRIS")?;
    let triangles = r.u32x3("index block")?;
    r.finish("index block")?;
    let colors = match section(b"COLR") {
        Some(mut r) => {
            let n = r.count(12, "color block")?;
            let c = (0..n)
                .map(|_| Ok([r.f32("color block")?, r.f32("color block")?, r.f32("color block")?]))
                .collect::<Result<Vec<_>, SceneError>>()?;
            r.finish("color block")?;
            Some(c)
        }
        None => None,
    };
    let mut r = require(b"NAVV")?;
    let nav_vertices = r.vec3s("navmesh vertices")?;
    r.finish("navmesh vertices")?;
    let mut r = require(b"NAVT")?;
    let nav_triangles = r.u32x3("navmesh triangles")?;
    r.finish("navmesh triangles")?;
    let mut r = require(b"NAVA")?;
    let n = r.count(12, "navmesh adjacency")?;
    let adjacency = (0..n)
        .map(|_| {
            Ok([
                r.i32("navmesh adjacency")?,
                r.i32("navmesh adjacency")?,
                r.i32("navmesh adjacency")?,
            ])
        })
        .collect::<Result<Vec<_>, SceneError>>()?;
    r.finish("navmesh adjacency")?;
    let mut r = require(b"BNDS")?;
    let mut b = [0.0; 6];
    for x in b.iter_mut() {
        *x = r.f64("bounds")?;
    }
    r.finish("bounds")?;
    let bounds = Aabb {
        min: DVec3::new(b[0], b[1], b[2]),
        max: DVec3::new(b[3], b[4], b[5]),
    };

    let stored = SceneId(bytes[payload_end..].try_into().expect("32 bytes"));
    let computed = SceneId(Sha256::digest(&bytes[..payload_end]).into());
    if stored != computed {
        return Err(SceneError::Corrupt { stored, computed });
    }

    let navmesh = NavMesh::from_parts(nav_vertices, nav_triangles, adjacency)?;
    let asset = SceneAsset::from_parts_unhashed(vertices, triangles, colors, navmesh, bounds)?;
    // a file written by another encoder with a different section order is
    // still accepted, but the id is always the canonical content hash
    let canonical = content_hash(&asset);
    Ok(asset.with_id(canonical))
}

pub fn save_scene(asset: &SceneAsset, path: impl AsRef<Path>) -> Result<(), SceneError> {
    let path = path.as_ref();
    std::fs::write(path, encode_scene(asset)).map_err(|source| SceneError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_scene(path: impl AsRef<Path>) -> Result<SceneAsset, SceneError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| SceneError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_scene(&bytes)
}
