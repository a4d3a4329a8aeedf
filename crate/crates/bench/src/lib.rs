//! Criterion benchmarks for the numeric kernels of `dpclip-core`; see `benches/`.
