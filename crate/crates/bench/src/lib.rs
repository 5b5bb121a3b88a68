//! Criterion benchmarks of the hot paths; see `benches/pipeline.rs`.
