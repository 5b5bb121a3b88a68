//! `.dmb` dynamic mesh container.
//!
//! ```text
//! magic    b"DYM1"
//! version  u16            (= 1)
//! M, N, T  u32 each       faces, vertices, frames
//! faces    M × 3 u32
//! vertices T × N × 3 f32  frame-major
//! caption  optional: u32 byte length + UTF-8 bytes
//! ```
//!
//! Everything is little-endian. A file ends either right after the vertex
//! block or right after exactly one caption block.

use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::mesh::{DynamicMesh, Vec3};

pub const MAGIC: &[u8; 4] = b"DYM1";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 4 + 2 + 12;

#[derive(Debug, Error)]
pub enum DmbError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated: needed {needed} bytes, {available} available")]
    Truncated { needed: u64, available: u64 },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("face {face} holds index {index}, but only {vertices} vertices exist")]
    IndexOutOfRange {
        face: usize,
        index: u32,
        vertices: u32,
    },
    #[error("face {0} repeats a vertex")]
    DegenerateFace(usize),
    #[error("header declares an invalid mesh (M={m}, N={n}, T={t})")]
    BadHeader { m: u32, n: u32, t: u32 },
    #[error("non-finite coordinate at value {0}")]
    NonFinite(usize),
    #[error("caption is not valid UTF-8")]
    InvalidCaption,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl DmbError {
    /// Stable numeric code per failure class.
    pub fn code(&self) -> u8 {
        match self {
            DmbError::BadMagic(_) => 1,
            DmbError::UnsupportedVersion(_) => 2,
            DmbError::Truncated { .. } => 3,
            DmbError::TrailingBytes(_) => 4,
            DmbError::IndexOutOfRange { .. } => 5,
            DmbError::DegenerateFace(_) => 6,
            DmbError::BadHeader { .. } => 7,
            DmbError::NonFinite(_) => 8,
            DmbError::InvalidCaption => 9,
            DmbError::Io(_) => 10,
        }
    }
}

pub fn encode(mesh: &DynamicMesh) -> Vec<u8> {
    let (m, n, t) = (mesh.num_faces(), mesh.num_vertices(), mesh.num_frames());
    let caption_len = mesh.caption().map_or(0, |c| 4 + c.len());
    let mut out = Vec::with_capacity(HEADER_LEN + 12 * m + 12 * n * t + caption_len);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [m, n, t] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for f in mesh.faces() {
        for &i in f {
            out.extend_from_slice(&i.to_le_bytes());
        }
    }
    for p in mesh.positions() {
        for &c in p {
            out.extend_from_slice(&c.to_le_bytes());
        }
    }
    if let Some(c) = mesh.caption() {
        out.extend_from_slice(&(c.len() as u32).to_le_bytes());
        out.extend_from_slice(c.as_bytes());
    }
    out
}

fn need(bytes: &[u8], pos: u64, len: u64) -> Result<(), DmbError> {
    let available = bytes.len() as u64 - pos.min(bytes.len() as u64);
    if len > available {
        return Err(DmbError::Truncated {
            needed: pos + len,
            available: bytes.len() as u64,
        });
    }
    Ok(())
}

fn u32_at(bytes: &[u8], pos: usize) -> u32 {
    u32::from_le_bytes(bytes[pos..pos + 4].try_into().expect("4 bytes"))
}

pub fn decode(bytes: &[u8]) -> Result<DynamicMesh, DmbError> {
    need(bytes, 0, 4)?;
    let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
    if &magic != MAGIC {
        return Err(DmbError::BadMagic(magic));
    }
    need(bytes, 4, 2)?;
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(DmbError::UnsupportedVersion(version));
    }
    need(bytes, 6, 12)?;
    let (m, n, t) = (u32_at(bytes, 6), u32_at(bytes, 10), u32_at(bytes, 14));
    if m < 1 || n < 3 || t < 1 {
        return Err(DmbError::BadHeader { m, n, t });
    }
    // u64 arithmetic cannot overflow for u32 extents
    let face_bytes = 12 * m as u64;
    let vert_bytes = 12 * n as u64 * t as u64;
    let mut pos = HEADER_LEN as u64;
    need(bytes, pos, face_bytes)?;
    need(bytes, pos + face_bytes, vert_bytes)?;

    let mut faces = Vec::with_capacity(m as usize);
    for fi in 0..m as usize {
        let base = pos as usize + 12 * fi;
        let f = [
            u32_at(bytes, base),
            u32_at(bytes, base + 4),
            u32_at(bytes, base + 8),
        ];
        if let Some(&index) = f.iter().find(|&&i| i >= n) {
            return Err(DmbError::IndexOutOfRange {
                face: fi,
                index,
                vertices: n,
            });
        }
        if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
            return Err(DmbError::DegenerateFace(fi));
        }
        faces.push(f);
    }
    pos += face_bytes;

    let count = n as usize * t as usize;
    let mut positions: Vec<Vec3> = Vec::with_capacity(count);
    let raw = &bytes[pos as usize..(pos + vert_bytes) as usize];
    for (k, c) in raw.chunks_exact(12).enumerate() {
        let p = [
            f32::from_le_bytes(c[0..4].try_into().expect("4 bytes")),
            f32::from_le_bytes(c[4..8].try_into().expect("4 bytes")),
            f32::from_le_bytes(c[8..12].try_into().expect("4 bytes")),
        ];
        if let Some(j) = p.iter().position(|x| !x.is_finite()) {
            return Err(DmbError::NonFinite(3 * k + j));
        }
        positions.push(p);
    }
    pos += vert_bytes;

    let caption = if pos as usize == bytes.len() {
        None
    } else {
        need(bytes, pos, 4)?;
        let len = u32_at(bytes, pos as usize) as u64;
        pos += 4;
        need(bytes, pos, len)?;
        let text = std::str::from_utf8(&bytes[pos as usize..(pos + len) as usize])
            .map_err(|_| DmbError::InvalidCaption)?
            .to_owned();
        pos += len;
        if (pos as usize) < bytes.len() {
            return Err(DmbError::TrailingBytes(bytes.len() - pos as usize));
        }
        Some(text)
    };

    Ok(
        DynamicMesh::new(faces, n as usize, t as usize, positions, caption)
            .expect("decoded fields were validated"),
    )
}

pub fn write(path: &Path, mesh: &DynamicMesh) -> Result<(), DmbError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(mesh))?;
    Ok(())
}

pub fn read(path: &Path) -> Result<DynamicMesh, DmbError> {
    decode(&std::fs::read(path)?)
}
