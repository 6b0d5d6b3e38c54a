//! Criterion benchmarks for the geometry, network and labeling kernels; see `benches/`.
