//! Criterion benchmarks for the field, compositing and meshing kernels; see
//! `benches/kernels.rs`.
