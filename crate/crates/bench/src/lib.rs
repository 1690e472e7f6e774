//! Criterion benchmarks for the gridmf kernels; see `benches/kernels.rs`.
