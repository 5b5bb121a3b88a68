//! Minimal differentiable numeric core: dense tensors, a reverse-mode tape,
//! a handful of layers, attention kernels and the checkpoint container.

pub mod attention;
pub mod checkpoint;
pub mod fourier;
pub mod graph;
pub mod nn;
pub mod param;
pub mod tensor;

pub use attention::{
    full_mask, masked_self_attention, multi_head_attention, shared_map_cross_attention, Attended,
    CrossAttentionMap, MaskMode, SelfAttention, SharedMapAttention, SharedMapInputs,
};
pub use checkpoint::Checkpoint;
pub use fourier::FourierEncoding;
pub use graph::{Gradients, Graph, Mask, Var};
pub use nn::{Init, Linear, Mlp};
pub use param::{Adam, AdamConfig, LrSchedule, ParamId, ParamStore, Parameter};
pub use tensor::{Real, Tensor};
