//! Data curation and batching: the `.dmb` codec, window slicing with
//! reverse augmentation, normalization, filtering, padded batches, corpus
//! statistics and synthetic sources.

pub mod batch;
pub mod curate;
pub mod dmb;
pub mod manifest;
pub mod stats;
pub mod synth;

pub use batch::{face_capacity, pad_batch, PaddedBatch};
pub use curate::{
    filter, max_interframe_motion, motion_filter, normalize_window, ratio_filter, slice_windows,
    window_starts, RejectReason, Verdict, WindowOrigin,
};
pub use dmb::DmbError;
pub use manifest::ManifestEntry;
pub use stats::{compute_stats, CorpusStats, RunningStats};
pub use synth::{Generator, SyntheticSpec};
