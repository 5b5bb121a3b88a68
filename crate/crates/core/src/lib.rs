//! Text-driven animation of arbitrary triangle meshes.
//!
//! A dynamic mesh is split into its first frame and per-frame offsets. The
//! [`vae`] compresses the offsets into a small set of latent tokens chosen by
//! farthest point sampling over topology-aware vertex features, and the
//! [`flow`] model learns a text- and shape-conditioned rectified flow over
//! those latents. Sampling the flow and decoding animates a static mesh.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod fixtures;
pub mod flow;
pub mod mesh;
pub mod numerics;
pub mod rng;
pub mod text;
pub mod vae;

pub use error::{Error, Result};
pub use mesh::{DynamicMesh, Vec3};
pub use numerics::{Real, Tensor};
