use crate::error::{Error, Result};
use crate::mesh::{DynamicMesh, Vec3};

/// Meshes padded to common vertex and face counts.
///
/// Padded vertex rows are `(0, 0, 0)`; padded face rows are `(-1, -1, -1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedBatch {
    pub num_frames: usize,
    pub max_vertices: usize,
    pub max_faces: usize,
    /// `B × T × Nmax`, frame-major per item.
    pub vertices: Vec<Vec3>,
    /// `B × Mmax`
    pub faces: Vec<[i32; 3]>,
    pub valid_vertex_count: Vec<usize>,
    pub valid_face_count: Vec<usize>,
    pub captions: Vec<Option<String>>,
}

/// Face budget for a given vertex budget: `ceil(2.5 · n)`.
pub fn face_capacity(max_vertices: usize) -> usize {
    (5 * max_vertices).div_ceil(2)
}

pub fn pad_batch(items: &[DynamicMesh]) -> Result<PaddedBatch> {
    let first = items
        .first()
        .ok_or_else(|| Error::Validation("empty batch".into()))?;
    let t = first.num_frames();
    if let Some(bad) = items.iter().position(|m| m.num_frames() != t) {
        return Err(Error::Validation(format!(
            "item {bad} has {} frames, expected {t}",
            items[bad].num_frames()
        )));
    }
    let n_max = items
        .iter()
        .map(DynamicMesh::num_vertices)
        .max()
        .unwrap_or(0);
    let m_max = face_capacity(n_max);
    if let Some(bad) = items.iter().position(|m| m.num_faces() > m_max) {
        return Err(Error::Validation(format!(
            "item {bad} has {} faces, more than the padded capacity {m_max}",
            items[bad].num_faces()
        )));
    }

    let mut vertices = Vec::with_capacity(items.len() * t * n_max);
    let mut faces = Vec::with_capacity(items.len() * m_max);
    for m in items {
        let n = m.num_vertices();
        for f in 0..t {
            vertices.extend_from_slice(m.frame(f));
            vertices.extend(std::iter::repeat_n([0.0; 3], n_max - n));
        }
        faces.extend(m.faces().iter().map(|f| f.map(|i| i as i32)));
        faces.extend(std::iter::repeat_n([-1; 3], m_max - m.num_faces()));
    }
    Ok(PaddedBatch {
        num_frames: t,
        max_vertices: n_max,
        max_faces: m_max,
        vertices,
        faces,
        valid_vertex_count: items.iter().map(DynamicMesh::num_vertices).collect(),
        valid_face_count: items.iter().map(DynamicMesh::num_faces).collect(),
        captions: items
            .iter()
            .map(|m| m.caption().map(String::from))
            .collect(),
    })
}

impl PaddedBatch {
    pub fn len(&self) -> usize {
        self.valid_vertex_count.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid_vertex_count.is_empty()
    }

    /// Padded `T × Nmax` positions of item `b`.
    pub fn item_vertices(&self, b: usize) -> &[Vec3] {
        let span = self.num_frames * self.max_vertices;
        &self.vertices[b * span..(b + 1) * span]
    }

    /// All `Mmax` face rows of item `b`, padding included.
    pub fn item_faces(&self, b: usize) -> &[[i32; 3]] {
        &self.faces[b * self.max_faces..(b + 1) * self.max_faces]
    }

    /// The real mesh stored at `b`.
    pub fn item(&self, b: usize) -> Result<DynamicMesh> {
        let n = self.valid_vertex_count[b];
        let verts = self.item_vertices(b);
        let positions = (0..self.num_frames)
            .flat_map(|f| {
                verts[f * self.max_vertices..f * self.max_vertices + n]
                    .iter()
                    .copied()
            })
            .collect();
        let faces = self.item_faces(b)[..self.valid_face_count[b]]
            .iter()
            .map(|f| f.map(|i| i as u32))
            .collect();
        DynamicMesh::new(
            faces,
            n,
            self.num_frames,
            positions,
            self.captions[b].clone(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mesh(n: usize, t: usize) -> DynamicMesh {
        let faces = (0..n - 2)
            .map(|i| [i as u32, i as u32 + 1, i as u32 + 2])
            .collect();
        let frames = (0..t)
            .map(|f| (0..n).map(|i| [i as f32, f as f32, 1.5]).collect())
            .collect();
        DynamicMesh::from_frames(faces, frames, None).unwrap()
    }

    #[test]
    fn capacity_rounds_up() {
        assert_eq!(face_capacity(10), 25);
        assert_eq!(face_capacity(3), 8);
    }

    #[test]
    fn single_item_has_no_vertex_padding() {
        let b = pad_batch(&[mesh(6, 2)]).unwrap();
        assert_eq!(b.max_vertices, 6);
        assert!(b.item_vertices(0).iter().all(|p| p[2] == 1.5));
        assert_eq!(b.item(0).unwrap(), mesh(6, 2));
    }

    #[test]
    fn shorter_item_is_zero_padded() {
        let b = pad_batch(&[mesh(10, 3), mesh(4, 3)]).unwrap();
        for f in 0..3 {
            let frame = &b.item_vertices(1)[f * 10..(f + 1) * 10];
            assert!(frame[4..].iter().all(|p| *p == [0.0; 3]));
            assert!(frame[..4].iter().all(|p| p[2] == 1.5));
        }
        assert_eq!(b.max_faces, 25);
        assert!(b.item_faces(1)[2..].iter().all(|f| *f == [-1; 3]));
        assert_eq!(b.item(1).unwrap(), mesh(4, 3));
    }

    #[test]
    fn mismatched_frames_and_overfull_faces_fail() {
        assert!(pad_batch(&[mesh(4, 2), mesh(4, 3)]).is_err());
        let dense: Vec<[u32; 3]> = (0..9).map(|k| [0, 1 + k % 2, 2 - k % 2]).collect();
        let m = DynamicMesh::from_frames(
            dense,
            vec![vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]],
            None,
        )
        .unwrap();
        assert!(pad_batch(&[m]).is_err());
        assert!(pad_batch(&[]).is_err());
    }
}
