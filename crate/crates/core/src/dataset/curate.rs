//! Window slicing, reverse augmentation, normalization and filtering.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::DynamicMesh;

pub const MIN_MOTION: f32 = 0.01;
pub const MAX_MOTION: f32 = 0.5;
pub const MAX_FACE_VERTEX_RATIO: f64 = 2.5;

/// Where a window came from inside its source animation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowOrigin {
    pub start: usize,
    pub reversed: bool,
}

/// Non-overlapping windows from offset 0 and, independently, from offset
/// `window / 2`; each forward window is followed by its frame-reversed copy.
/// Trailing frames that do not fill a window are dropped.
pub fn slice_windows(animation: &DynamicMesh, window: usize) -> Vec<(WindowOrigin, DynamicMesh)> {
    window_starts(animation.num_frames(), window)
        .into_iter()
        .flat_map(|start| {
            let fwd = animation.window(start, window);
            let rev = fwd.reversed();
            [
                (
                    WindowOrigin {
                        start,
                        reversed: false,
                    },
                    fwd,
                ),
                (
                    WindowOrigin {
                        start,
                        reversed: true,
                    },
                    rev,
                ),
            ]
        })
        .collect()
}

/// Start offsets of the forward windows, first pass then second pass.
pub fn window_starts(frames: usize, window: usize) -> Vec<usize> {
    if window == 0 {
        return Vec::new();
    }
    let mut starts = Vec::new();
    for offset in [0, window / 2] {
        let mut s = offset;
        while s + window <= frames {
            starts.push(s);
            s += window;
        }
    }
    starts
}

/// Centers frame 0's bounding box at the origin and scales every frame by
/// frame 0's largest absolute coordinate after centering.
pub fn normalize_window(mesh: &DynamicMesh) -> Result<DynamicMesh> {
    let f0 = mesh.frame(0);
    let mut lo = [f32::INFINITY; 3];
    let mut hi = [f32::NEG_INFINITY; 3];
    for p in f0 {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let center = [0, 1, 2].map(|k| 0.5 * (lo[k] + hi[k]));
    let extent = f0
        .iter()
        .flat_map(|p| (0..3).map(move |k| (p[k] - center[k]).abs()))
        .fold(0.0f32, f32::max);
    if !(extent > 0.0) {
        return Err(Error::Validation("frame 0 has zero extent".into()));
    }
    Ok(mesh.map_positions(|p| [0, 1, 2].map(|k| (p[k] - center[k]) / extent)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    MotionBelowMin,
    MotionAboveMax,
    FaceVertexRatio,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::MotionBelowMin => "motion_below_min",
            RejectReason::MotionAboveMax => "motion_above_max",
            RejectReason::FaceVertexRatio => "face_vertex_ratio",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Keep,
    Reject(RejectReason),
}

impl Verdict {
    pub fn is_keep(self) -> bool {
        self == Verdict::Keep
    }
}

/// Largest absolute coordinate change between consecutive frames.
pub fn max_interframe_motion(mesh: &DynamicMesh) -> f32 {
    let mut m = 0.0f32;
    for t in 1..mesh.num_frames() {
        for (a, b) in mesh.frame(t - 1).iter().zip(mesh.frame(t)) {
            for k in 0..3 {
                m = m.max((b[k] - a[k]).abs());
            }
        }
    }
    m
}

/// Keeps sequences whose inter-frame motion lies in `[0.01, 0.5]`.
pub fn motion_filter(mesh: &DynamicMesh) -> Verdict {
    let m = max_interframe_motion(mesh);
    if m < MIN_MOTION {
        Verdict::Reject(RejectReason::MotionBelowMin)
    } else if m > MAX_MOTION {
        Verdict::Reject(RejectReason::MotionAboveMax)
    } else {
        Verdict::Keep
    }
}

/// Keeps meshes with at most 2.5 faces per vertex.
pub fn ratio_filter(mesh: &DynamicMesh) -> Verdict {
    // M/N ≤ 2.5  ⇔  2M ≤ 5N, exact in integers
    if 2 * mesh.num_faces() <= 5 * mesh.num_vertices() {
        Verdict::Keep
    } else {
        Verdict::Reject(RejectReason::FaceVertexRatio)
    }
}

/// Motion filter, then ratio filter.
pub fn filter(mesh: &DynamicMesh) -> Verdict {
    match motion_filter(mesh) {
        Verdict::Keep => ratio_filter(mesh),
        r => r,
    }
}
