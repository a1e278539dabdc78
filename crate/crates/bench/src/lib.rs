//! Criterion benchmarks live in `benches/`. This crate has no library surface.
