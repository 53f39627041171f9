//! Criterion benchmarks for detectors and training kernels; see `benches/`.
