//! Criterion benchmarks for the solver hot paths live in `benches/`.
