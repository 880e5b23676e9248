//! Benchmarks only; see `benches/head.rs`.
