//! Dynamic mesh representation, connectivity, deduplication, trajectory
//! decomposition and farthest point sampling.

use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Mask, Real, Tensor};

pub type Vec3 = [f32; 3];

/// Fixed-topology triangle mesh over `T` frames.
///
/// Positions are stored frame-major: vertex `i` of frame `t` is
/// `positions[t * N + i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicMesh {
    faces: Vec<[u32; 3]>,
    num_vertices: usize,
    num_frames: usize,
    positions: Vec<Vec3>,
    caption: Option<String>,
}

impl DynamicMesh {
    pub fn new(
        faces: Vec<[u32; 3]>,
        num_vertices: usize,
        num_frames: usize,
        positions: Vec<Vec3>,
        caption: Option<String>,
    ) -> Result<Self> {
        let mesh = Self {
            faces,
            num_vertices,
            num_frames,
            positions,
            caption,
        };
        mesh.validate()?;
        Ok(mesh)
    }

    /// Builds a mesh from per-frame vertex lists.
    pub fn from_frames(
        faces: Vec<[u32; 3]>,
        frames: Vec<Vec<Vec3>>,
        caption: Option<String>,
    ) -> Result<Self> {
        let t = frames.len();
        let n = frames.first().map_or(0, Vec::len);
        if frames.iter().any(|f| f.len() != n) {
            return Err(Error::InvalidMesh(
                "frames have different vertex counts".into(),
            ));
        }
        Self::new(faces, n, t, frames.into_iter().flatten().collect(), caption)
    }

    pub fn validate(&self) -> Result<()> {
        let (n, t) = (self.num_vertices, self.num_frames);
        if t < 1 {
            return Err(Error::InvalidMesh("needs at least one frame".into()));
        }
        if n < 3 {
            return Err(Error::InvalidMesh(format!(
                "needs at least 3 vertices, got {n}"
            )));
        }
        if self.faces.is_empty() {
            return Err(Error::InvalidMesh("needs at least one face".into()));
        }
        if self.positions.len() != n * t {
            return Err(Error::InvalidMesh(format!(
                "expected {} positions for {t} frames of {n} vertices, got {}",
                n * t,
                self.positions.len()
            )));
        }
        for (fi, f) in self.faces.iter().enumerate() {
            if f.iter().any(|&i| i as usize >= n) {
                return Err(Error::InvalidMesh(format!(
                    "face {fi} {f:?} indexes past {n} vertices"
                )));
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::InvalidMesh(format!(
                    "face {fi} {f:?} repeats a vertex"
                )));
            }
        }
        if let Some(p) = self
            .positions
            .iter()
            .position(|p| p.iter().any(|c| !c.is_finite()))
        {
            return Err(Error::InvalidMesh(format!(
                "non-finite coordinate at position {p}"
            )));
        }
        Ok(())
    }

    pub fn faces(&self) -> &[[u32; 3]] {
        &self.faces
    }

    pub fn num_vertices(&self) -> usize {
        self.num_vertices
    }

    pub fn num_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }

    pub fn caption(&self) -> Option<&str> {
        self.caption.as_deref()
    }

    pub fn set_caption(&mut self, caption: Option<String>) {
        self.caption = caption;
    }

    pub fn frame(&self, t: usize) -> &[Vec3] {
        let n = self.num_vertices;
        &self.positions[t * n..(t + 1) * n]
    }

    /// `len` consecutive frames starting at `start`.
    pub fn window(&self, start: usize, len: usize) -> Self {
        let n = self.num_vertices;
        Self {
            faces: self.faces.clone(),
            num_vertices: n,
            num_frames: len,
            positions: self.positions[start * n..(start + len) * n].to_vec(),
            caption: self.caption.clone(),
        }
    }

    /// Same mesh with frame order reversed.
    pub fn reversed(&self) -> Self {
        let positions = (0..self.num_frames)
            .rev()
            .flat_map(|t| self.frame(t).iter().copied())
            .collect();
        Self {
            positions,
            ..self.clone()
        }
    }

    /// Static mesh holding only frame 0.
    pub fn first_frame(&self) -> Self {
        self.window(0, 1)
    }

    pub(crate) fn map_positions(&self, f: impl Fn(Vec3) -> Vec3) -> Self {
        Self {
            positions: self.positions.iter().map(|&p| f(p)).collect(),
            ..self.clone()
        }
    }
}

/// Reflexive, symmetric vertex connectivity induced by faces.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyMask {
    n: usize,
    bits: Arc<Vec<bool>>,
}

impl AdjacencyMask {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.n + j]
    }

    /// Dense attention mask sharing this predicate.
    pub fn to_mask(&self) -> Mask {
        Mask::Dense(Arc::clone(&self.bits))
    }

    /// Number of unordered off-diagonal pairs.
    pub fn edge_count(&self) -> usize {
        (0..self.n)
            .map(|i| ((i + 1)..self.n).filter(|&j| self.get(i, j)).count())
            .sum()
    }

    /// Adjacency from padded faces: rows holding a negative index are
    /// ignored.
    pub fn from_padded_faces(faces: &[[i32; 3]], n: usize) -> Result<Self> {
        let mut bits = identity_bits(n);
        for f in faces.iter().filter(|f| f.iter().all(|&i| i >= 0)) {
            let f = [f[0] as u32, f[1] as u32, f[2] as u32];
            add_face(&mut bits, n, f)?;
        }
        Ok(Self {
            n,
            bits: Arc::new(bits),
        })
    }
}

fn identity_bits(n: usize) -> Vec<bool> {
    let mut bits = vec![false; n * n];
    for i in 0..n {
        bits[i * n + i] = true;
    }
    bits
}

fn add_face(bits: &mut [bool], n: usize, f: [u32; 3]) -> Result<()> {
    if let Some(&bad) = f.iter().find(|&&i| i as usize >= n) {
        return Err(Error::Validation(format!(
            "face {f:?} has index {bad} outside 0..{n}"
        )));
    }
    for a in 0..3 {
        for b in 0..3 {
            if a != b {
                bits[f[a] as usize * n + f[b] as usize] = true;
            }
        }
    }
    Ok(())
}

/// Adjacency matrix with self-connections, built from triangle faces.
pub fn build_adjacency(faces: &[[u32; 3]], n: usize) -> Result<AdjacencyMask> {
    let mut bits = identity_bits(n);
    for &f in faces {
        add_face(&mut bits, n, f)?;
    }
    Ok(AdjacencyMask {
        n,
        bits: Arc::new(bits),
    })
}

/// Collapses vertices whose frame-0 positions agree within `tol` in every
/// coordinate onto the lowest-index representative.
///
/// Faces are reindexed; faces that become degenerate are dropped, as are
/// faces repeating an earlier face's vertex set.
pub fn merge_duplicate_vertices(mesh: &DynamicMesh, tol: f32) -> Result<DynamicMesh> {
    let n = mesh.num_vertices();
    let frame0 = mesh.frame(0);
    let canonical = if tol <= 0.0 {
        exact_groups(frame0)
    } else {
        tolerant_groups(frame0, tol)
    };

    // survivors keep their relative order
    let mut new_index = vec![u32::MAX; n];
    let mut survivors = Vec::new();
    for i in 0..n {
        if canonical[i] == i {
            new_index[i] = survivors.len() as u32;
            survivors.push(i);
        }
    }
    if survivors.len() == n {
        let mut seen = HashSet::new();
        if mesh.faces().iter().all(|f| seen.insert(sorted(*f))) {
            return Ok(mesh.clone());
        }
    }

    let mut seen = HashSet::new();
    let mut faces = Vec::with_capacity(mesh.num_faces());
    for f in mesh.faces() {
        let g = f.map(|i| new_index[canonical[i as usize]]);
        if g[0] == g[1] || g[1] == g[2] || g[0] == g[2] {
            continue;
        }
        if seen.insert(sorted(g)) {
            faces.push(g);
        }
    }
    if faces.is_empty() {
        return Err(Error::InvalidMesh(
            "every face is degenerate after merging duplicate vertices".into(),
        ));
    }

    let t = mesh.num_frames();
    let mut positions = Vec::with_capacity(t * survivors.len());
    for f in 0..t {
        let frame = mesh.frame(f);
        positions.extend(survivors.iter().map(|&i| frame[i]));
    }
    DynamicMesh::new(faces, survivors.len(), t, positions, mesh.caption.clone())
}

fn sorted(mut f: [u32; 3]) -> [u32; 3] {
    f.sort_unstable();
    f
}

fn exact_groups(frame0: &[Vec3]) -> Vec<usize> {
    // +0.0 and -0.0 compare equal, so normalize the sign of zero in the key
    let key = |p: &Vec3| p.map(|c| if c == 0.0 { 0u32 } else { c.to_bits() });
    let mut first: HashMap<[u32; 3], usize> = HashMap::with_capacity(frame0.len());
    frame0
        .iter()
        .enumerate()
        .map(|(i, p)| *first.entry(key(p)).or_insert(i))
        .collect()
}

fn tolerant_groups(frame0: &[Vec3], tol: f32) -> Vec<usize> {
    let cell = |p: &Vec3| p.map(|c| (c / tol).floor() as i64);
    let mut grid: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    let mut canonical = Vec::with_capacity(frame0.len());
    for (i, p) in frame0.iter().enumerate() {
        let c = cell(p);
        let mut best: Option<usize> = None;
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let Some(reps) = grid.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) else {
                        continue;
                    };
                    for &r in reps {
                        let q = frame0[r];
                        let close = (0..3).all(|k| (p[k] - q[k]).abs() <= tol);
                        if close && best.is_none_or(|b| r < b) {
                            best = Some(r);
                        }
                    }
                }
            }
        }
        match best {
            Some(r) => canonical.push(r),
            None => {
                grid.entry(c).or_default().push(i);
                canonical.push(i);
            }
        }
    }
    canonical
}

/// Initial-frame positions plus offsets of every frame relative to them.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDecomposition {
    pub v0: Vec<Vec3>,
    /// Frame-major `T × N` offsets; frame 0 is all zero.
    pub vt: Vec<Vec3>,
    pub num_frames: usize,
}

impl TrajectoryDecomposition {
    pub fn num_vertices(&self) -> usize {
        self.v0.len()
    }

    /// `N × 3` matrix of initial positions.
    pub fn v0_matrix<T: Real>(&self) -> Tensor<T> {
        Tensor::from_fn(self.v0.len(), 3, |i, c| T::lit(self.v0[i][c] as f64))
    }

    /// `N × 3T` matrix; row `i` is `[x₀, y₀, z₀, x₁, …]` of vertex `i`.
    pub fn vt_matrix<T: Real>(&self) -> Tensor<T> {
        let n = self.v0.len();
        Tensor::from_fn(n, 3 * self.num_frames, |i, c| {
            T::lit(self.vt[(c / 3) * n + i][c % 3] as f64)
        })
    }

    /// Inverse of [`TrajectoryDecomposition::vt_matrix`].
    pub fn from_matrices(v0: Vec<Vec3>, vt: &Tensor<f32>) -> Result<Self> {
        let n = v0.len();
        if vt.rows() != n || !vt.cols().is_multiple_of(3) {
            return Err(Error::Shape(format!(
                "trajectory matrix {:?} does not fit {n} vertices",
                vt.shape()
            )));
        }
        let t = vt.cols() / 3;
        let mut offsets = vec![[0.0; 3]; n * t];
        for f in 0..t {
            for i in 0..n {
                offsets[f * n + i] = [vt.at(i, 3 * f), vt.at(i, 3 * f + 1), vt.at(i, 3 * f + 2)];
            }
        }
        Ok(Self {
            v0,
            vt: offsets,
            num_frames: t,
        })
    }
}

/// Splits a sequence into frame 0 and per-frame offsets from it.
pub fn decompose(mesh: &DynamicMesh) -> TrajectoryDecomposition {
    let v0 = mesh.frame(0).to_vec();
    let n = v0.len();
    let vt = mesh
        .positions()
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let b = v0[k % n];
            [p[0] - b[0], p[1] - b[1], p[2] - b[2]]
        })
        .collect();
    TrajectoryDecomposition {
        v0,
        vt,
        num_frames: mesh.num_frames(),
    }
}

/// `frame[t] = v0 + vt[t]`, frame-major.
pub fn recompose(d: &TrajectoryDecomposition) -> Result<Vec<Vec3>> {
    let n = d.v0.len();
    if n == 0 || d.vt.len() != n * d.num_frames {
        return Err(Error::Shape(format!(
            "{} offsets do not match {} frames of {n} vertices",
            d.vt.len(),
            d.num_frames
        )));
    }
    Ok(d.vt
        .iter()
        .enumerate()
        .map(|(k, o)| {
            let b = d.v0[k % n];
            [b[0] + o[0], b[1] + o[1], b[2] + o[2]]
        })
        .collect())
}

/// Where farthest point sampling measures distances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FpsSpace {
    /// Topology-aware vertex embeddings.
    #[default]
    Embedding,
    /// Raw frame-0 coordinates.
    RawCoords,
}

/// Ordered farthest point selection.
#[derive(Debug, Clone, PartialEq)]
pub struct FpsSelection {
    pub indices: Vec<usize>,
    pub seed_index: usize,
    /// Squared distance from each selected point to the previously selected
    /// set at the time it was picked (`+∞` for the seed).
    pub coverage: Vec<f64>,
}

const FPS_PAR_THRESHOLD: usize = 1 << 14;

/// Greedy max-min selection of `n` rows of `features` under Euclidean
/// distance, starting from `seed_index`. Ties go to the lowest index.
pub fn farthest_point_sampling<T: Real>(
    features: &Tensor<T>,
    n: usize,
    seed_index: usize,
) -> Result<FpsSelection> {
    let (rows, d) = (features.rows(), features.cols());
    if n == 0 || n > rows {
        return Err(Error::Validation(format!(
            "cannot select {n} of {rows} points"
        )));
    }
    if seed_index >= rows {
        return Err(Error::Validation(format!(
            "seed index {seed_index} outside 0..{rows}"
        )));
    }
    let data = features.data();
    let dist2 = |a: usize, b: usize| -> T {
        let (ra, rb) = (&data[a * d..(a + 1) * d], &data[b * d..(b + 1) * d]);
        let mut s = T::zero();
        for k in 0..d {
            let diff = ra[k] - rb[k];
            s = s + diff * diff;
        }
        s
    };

    let mut indices = Vec::with_capacity(n);
    let mut coverage = Vec::with_capacity(n);
    let mut min_d = vec![T::infinity(); rows];
    let mut chosen = vec![false; rows];
    let mut current = seed_index;
    indices.push(current);
    coverage.push(f64::INFINITY);
    chosen[current] = true;
    let parallel = rows * d >= FPS_PAR_THRESHOLD;

    while indices.len() < n {
        let update = |(j, m): (usize, &mut T)| {
            let dj = dist2(current, j);
            if dj < *m {
                *m = dj;
            }
        };
        if parallel {
            min_d.par_iter_mut().enumerate().for_each(update);
        } else {
            min_d.iter_mut().enumerate().for_each(update);
        }
        let mut best = usize::MAX;
        let mut best_d = T::neg_infinity();
        for (j, &m) in min_d.iter().enumerate() {
            if !chosen[j] && m > best_d {
                best = j;
                best_d = m;
            }
        }
        current = best;
        chosen[current] = true;
        indices.push(current);
        coverage.push(best_d.to_f64_lossy());
    }
    Ok(FpsSelection {
        indices,
        seed_index,
        coverage,
    })
}
