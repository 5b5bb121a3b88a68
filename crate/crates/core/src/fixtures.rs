//! Randomized meshes and parameters for tests, benches and acceptance runs.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::mesh::{DynamicMesh, Vec3};
use crate::numerics::{ParamStore, Real};
use crate::rng;

/// Random mesh with `n ≥ 3` vertices, up to `2.5 n` faces of distinct
/// indices, and smooth random per-vertex motion over `frames` frames.
pub fn random_mesh(seed: u64, n: usize, frames: usize) -> DynamicMesh {
    assert!(n >= 3, "a triangle needs three vertices");
    let mut r = rng::stream(seed, "fixtures.mesh", n as u64);
    let v0: Vec<Vec3> = (0..n)
        .map(|_| [0, 1, 2].map(|_| r.random_range(-1.0f32..1.0)))
        .collect();
    let max_faces = (5 * n) / 2;
    let m = r.random_range(1..=max_faces);
    let faces = (0..m)
        .map(|_| {
            let a = r.random_range(0..n);
            let mut b = r.random_range(0..n - 1);
            if b >= a {
                b += 1;
            }
            let mut c = r.random_range(0..n - 2);
            for lo in [a.min(b), a.max(b)] {
                if c >= lo {
                    c += 1;
                }
            }
            [a as u32, b as u32, c as u32]
        })
        .collect();
    let vel: Vec<Vec3> = (0..n)
        .map(|_| [0, 1, 2].map(|_| r.random_range(-0.05f32..0.05)))
        .collect();
    let phase: f32 = r.random_range(0.0..std::f32::consts::TAU);
    let frames = (0..frames)
        .map(|t| {
            let s = (phase + 0.4 * t as f32).sin() - phase.sin();
            v0.iter()
                .zip(&vel)
                .map(|(p, v)| [0, 1, 2].map(|k| p[k] + s * v[k] * 4.0))
                .collect()
        })
        .collect();
    DynamicMesh::from_frames(faces, frames, None).expect("generated mesh is valid")
}

/// Overwrites every parameter with `N(0, scale²)` samples. Useful where
/// zero-initialized heads would make outputs or gradients trivially zero.
pub fn randomize_params<T: Real>(store: &mut ParamStore<T>, scale: f64, seed: u64) {
    let ids: Vec<_> = store.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let mut r = rng::stream(seed, "fixtures.params", k as u64);
        for v in store.value_mut(id).data_mut() {
            let e: f64 = StandardNormal.sample(&mut r);
            *v = T::lit(scale * e);
        }
    }
}

/// `n × d` matrix of uniform values in `[-1, 1)`.
pub fn random_matrix<R: Rng>(r: &mut R, n: usize, d: usize) -> crate::Tensor<f32> {
    crate::Tensor::from_fn(n, d, |_, _| r.random_range(-1.0f32..1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn faces_are_valid_and_seeded() {
        for n in [3, 4, 10, 50] {
            let m = random_mesh(1, n, 4);
            assert!(m
                .faces()
                .iter()
                .all(|f| f[0] != f[1] && f[1] != f[2] && f[0] != f[2]));
            assert!(2 * m.num_faces() <= 5 * n);
            assert_eq!(m, random_mesh(1, n, 4));
            assert_eq!(m.frame(0), random_mesh(1, n, 4).frame(0));
        }
    }
}
