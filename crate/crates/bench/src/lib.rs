//! Criterion benchmarks for the quantlab kernels; see `benches/`.
