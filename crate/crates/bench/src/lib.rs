//! Criterion benchmarks for the estimators live under `benches/`.
