//! Procedural animated meshes standing in for converted source assets.

use std::f32::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{DynamicMesh, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Generator {
    /// UV sphere that breathes radially while bobbing.
    OscillatingSphere,
    /// Two disconnected tubes side by side moving in opposite directions.
    ArticulatedPair,
    /// Grid sheet carrying a travelling wave.
    WavingSheet,
    /// Tube twisting about its axis.
    TwistingBar,
    /// Tube bending at a hinge.
    SwingingArm,
}

impl Generator {
    pub const ALL: [Generator; 5] = [
        Generator::OscillatingSphere,
        Generator::ArticulatedPair,
        Generator::WavingSheet,
        Generator::TwistingBar,
        Generator::SwingingArm,
    ];

    pub fn caption(self) -> &'static str {
        match self {
            Generator::OscillatingSphere => "a sphere pulses and bobs up and down",
            Generator::ArticulatedPair => "two bars slide past each other",
            Generator::WavingSheet => "a flag ripples in the wind",
            Generator::TwistingBar => "a bar twists around its axis",
            Generator::SwingingArm => "an arm swings at the elbow",
        }
    }
}

/// Declarative request for a batch of synthetic animations, as read from a
/// `*.synth.json` source file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub generator: Generator,
    pub count: usize,
    pub frames: usize,
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn generate(&self) -> Result<Vec<DynamicMesh>> {
        (0..self.count)
            .map(|k| {
                generate(
                    self.generator,
                    self.frames,
                    self.seed.wrapping_add(k as u64),
                )
            })
            .collect()
    }
}

/// Variation knobs derived from a variant number: phase, speed and
/// amplitude stay inside ranges that pass the motion filter once
/// normalized.
struct Variation {
    phase: f32,
    cycles: f32,
    amp: f32,
}

fn variation(variant: u64) -> Variation {
    // cheap integer hash, no RNG dependency for fixtures
    let mut h = variant.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0xD1B5_4A32_D192_ED03;
    let mut next = || {
        h ^= h >> 29;
        h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h ^= h >> 32;
        (h >> 11) as f32 / (1u64 << 53) as f32
    };
    Variation {
        phase: 2.0 * PI * next(),
        cycles: 0.6 + 0.6 * next(),
        amp: 0.6 + 0.4 * next(),
    }
}

pub fn generate(kind: Generator, frames: usize, variant: u64) -> Result<DynamicMesh> {
    if frames == 0 {
        return Err(Error::Validation(
            "synthetic animation needs at least one frame".into(),
        ));
    }
    let v = variation(variant);
    // angular position along the clip; `cycles` full periods over 16 frames
    let theta = |t: usize| v.phase + 2.0 * PI * v.cycles * t as f32 / 16.0;
    let (faces, rest) = match kind {
        Generator::OscillatingSphere => uv_sphere(6, 10),
        Generator::ArticulatedPair => {
            let (fa, a) = tube(8, 6, 0.25, 2.0);
            let (fb, b) = tube(8, 6, 0.25, 2.0);
            let off = a.len() as u32;
            let mut verts: Vec<Vec3> = a.iter().map(|p| [p[0] - 0.3, p[1], p[2]]).collect();
            verts.extend(b.iter().map(|p| [p[0] + 0.3, p[1], p[2]]));
            let mut faces = fa;
            faces.extend(fb.iter().map(|f| f.map(|i| i + off)));
            (faces, verts)
        }
        Generator::WavingSheet => grid(9, 7),
        Generator::TwistingBar => tube(6, 8, 0.3, 2.0),
        Generator::SwingingArm => tube(6, 10, 0.2, 2.0),
    };
    let n_first = rest.len() / 2;

    let mut all = Vec::with_capacity(frames);
    for t in 0..frames {
        let th = theta(t);
        let frame: Vec<Vec3> = rest
            .iter()
            .enumerate()
            .map(|(i, &p)| match kind {
                Generator::OscillatingSphere => {
                    let s = 1.0 + 0.25 * v.amp * th.sin();
                    [
                        p[0] * s,
                        p[1] * s + 0.4 * v.amp * (th + 0.5).sin(),
                        p[2] * s,
                    ]
                }
                Generator::ArticulatedPair => {
                    // the two tubes are close in space but move in opposition
                    let dir = if i < n_first { 1.0 } else { -1.0 };
                    let lift = dir * 0.6 * v.amp * th.sin();
                    let sway = dir * 0.2 * v.amp * (th * 0.5).cos() * (p[1] + 1.0) * 0.5;
                    [p[0] + sway, p[1] + lift, p[2]]
                }
                Generator::WavingSheet => {
                    let w = 0.5 * v.amp * (th - 2.5 * p[0]).sin() * (p[0] + 1.0) * 0.5;
                    [p[0], p[1], p[2] + w]
                }
                Generator::TwistingBar => {
                    let a = 0.8 * v.amp * th.sin() * (p[1] + 1.0) * 0.5;
                    let (s, c) = a.sin_cos();
                    [c * p[0] - s * p[2], p[1], s * p[0] + c * p[2]]
                }
                Generator::SwingingArm => {
                    // bend about the hinge at y = 0; lower half stays put
                    if p[1] <= 0.0 {
                        p
                    } else {
                        let a = 0.7 * v.amp * th.sin();
                        let (s, c) = a.sin_cos();
                        [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]]
                    }
                }
            })
            .collect();
        all.push(frame);
    }
    DynamicMesh::from_frames(faces, all, Some(kind.caption().to_string()))
}

fn uv_sphere(rings: usize, segments: usize) -> (Vec<[u32; 3]>, Vec<Vec3>) {
    let mut verts = vec![[0.0, 1.0, 0.0]];
    for r in 1..rings {
        let phi = PI * r as f32 / rings as f32;
        for s in 0..segments {
            let th = 2.0 * PI * s as f32 / segments as f32;
            verts.push([phi.sin() * th.cos(), phi.cos(), phi.sin() * th.sin()]);
        }
    }
    verts.push([0.0, -1.0, 0.0]);
    let south = (verts.len() - 1) as u32;
    let ring = |r: usize, s: usize| (1 + (r - 1) * segments + s % segments) as u32;
    let mut faces = Vec::new();
    for s in 0..segments {
        faces.push([0, ring(1, s + 1), ring(1, s)]);
        faces.push([south, ring(rings - 1, s), ring(rings - 1, s + 1)]);
    }
    for r in 1..rings - 1 {
        for s in 0..segments {
            let (a, b, c, d) = (
                ring(r, s),
                ring(r, s + 1),
                ring(r + 1, s),
                ring(r + 1, s + 1),
            );
            faces.push([a, b, d]);
            faces.push([a, d, c]);
        }
    }
    (faces, verts)
}

/// Open tube along y in `[-len/2, len/2]`.
fn tube(segments: usize, levels: usize, radius: f32, len: f32) -> (Vec<[u32; 3]>, Vec<Vec3>) {
    let mut verts = Vec::with_capacity(segments * levels);
    for l in 0..levels {
        let y = -0.5 * len + len * l as f32 / (levels - 1) as f32;
        for s in 0..segments {
            let th = 2.0 * PI * s as f32 / segments as f32;
            verts.push([radius * th.cos(), y, radius * th.sin()]);
        }
    }
    let idx = |l: usize, s: usize| (l * segments + s % segments) as u32;
    let mut faces = Vec::new();
    for l in 0..levels - 1 {
        for s in 0..segments {
            faces.push([idx(l, s), idx(l, s + 1), idx(l + 1, s + 1)]);
            faces.push([idx(l, s), idx(l + 1, s + 1), idx(l + 1, s)]);
        }
    }
    (faces, verts)
}

/// Flat grid in the xy plane spanning `[-1, 1]²`.
fn grid(nx: usize, ny: usize) -> (Vec<[u32; 3]>, Vec<Vec3>) {
    let mut verts = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            verts.push([
                -1.0 + 2.0 * i as f32 / (nx - 1) as f32,
                -1.0 + 2.0 * j as f32 / (ny - 1) as f32,
                0.0,
            ]);
        }
    }
    let idx = |i: usize, j: usize| (j * nx + i) as u32;
    let mut faces = Vec::new();
    for j in 0..ny - 1 {
        for i in 0..nx - 1 {
            faces.push([idx(i, j), idx(i + 1, j), idx(i + 1, j + 1)]);
            faces.push([idx(i, j), idx(i + 1, j + 1), idx(i, j + 1)]);
        }
    }
    (faces, verts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::curate::{filter, normalize_window, Verdict};

    #[test]
    fn generators_produce_valid_filterable_meshes() {
        for kind in Generator::ALL {
            for variant in 0..4 {
                let m = generate(kind, 16, variant).unwrap();
                assert!(
                    m.num_vertices() <= 200,
                    "{kind:?} has {} vertices",
                    m.num_vertices()
                );
                let n = normalize_window(&m).unwrap();
                assert_eq!(
                    filter(&n),
                    Verdict::Keep,
                    "{kind:?} variant {variant} rejected"
                );
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SyntheticSpec {
            generator: Generator::OscillatingSphere,
            count: 3,
            frames: 32,
            seed: 7,
        };
        assert_eq!(spec.generate().unwrap(), spec.generate().unwrap());
    }
}
