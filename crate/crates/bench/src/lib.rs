//! Criterion benchmarks; see `benches/stereo.rs`.
