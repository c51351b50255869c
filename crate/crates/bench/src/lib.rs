//! Criterion benchmarks for the normvol kernels live in `benches/`.
